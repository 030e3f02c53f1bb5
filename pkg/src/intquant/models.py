"""Desk-scale architectures, built from a plain descriptor dict.

Two models cover every code path of the pipeline: a small residual CNN
for classification (first/last layers kept in full precision) and a
three-conv image-restoration net whose input skips to the output
(first/last layers quantized, 16-bit input).
"""

from __future__ import annotations

import numpy as np

from intquant.nn import (
    ActQuant,
    Add,
    BatchNorm2d,
    Conv2d,
    Dropout,
    GlobalAvgPool,
    Linear,
    MaxPool2d,
    Model,
    Node,
    QuantUnit,
)


def build_mini_resnet(desc, rng):
    """32x32x3 classifier: five convs with one residual block, then a
    global-average-pooled linear head. Spatial size drops to 16 right
    after the stem so the residual block stays cheap."""
    c = int(desc.get("channels", 12))
    classes = int(desc.get("classes", 10))
    nodes = [
        Node("qin", ActQuant(relu=False), ("input",)),
        Node("conv1", Conv2d(3, c, 3, bias=False, rng=rng), ("qin",)),
        Node("bn1", BatchNorm2d(c), ("conv1",)),
        Node("act1", ActQuant(), ("bn1",)),
        Node("pool1", MaxPool2d(2), ("act1",)),
        Node("conv2", Conv2d(c, c, 3, bias=False, rng=rng), ("pool1",)),
        Node("bn2", BatchNorm2d(c), ("conv2",)),
        Node("act2", ActQuant(), ("bn2",)),
        Node("conv3", Conv2d(c, c, 3, bias=False, rng=rng), ("act2",)),
        Node("bn3", BatchNorm2d(c), ("conv3",)),
        Node("add3", Add(), ("bn3", "pool1")),
        Node("act3", ActQuant(), ("add3",)),
        Node("conv4", Conv2d(c, 2 * c, 3, stride=2, bias=False, rng=rng), ("act3",)),
        Node("bn4", BatchNorm2d(2 * c), ("conv4",)),
        Node("act4", ActQuant(), ("bn4",)),
        Node("conv5", Conv2d(2 * c, 2 * c, 3, bias=False, rng=rng), ("act4",)),
        Node("bn5", BatchNorm2d(2 * c), ("conv5",)),
        Node("act5", ActQuant(), ("bn5",)),
        Node("gap", GlobalAvgPool(), ("act5",)),
        Node("fc", Linear(2 * c, classes, rng=rng), ("gap",)),
    ]
    units = [
        QuantUnit("u_conv1", "conv1", "act1", "qin"),
        QuantUnit("u_conv2", "conv2", "act2", "act1"),
        QuantUnit("u_conv3", "conv3", "act3", "act2"),
        QuantUnit("u_conv4", "conv4", "act4", "act3"),
        QuantUnit("u_conv5", "conv5", "act5", "act4"),
        QuantUnit("u_fc", "fc", None, "act5"),
    ]
    return Model(dict(desc), nodes, units, "fc")


def build_denoise_cnn(desc, rng):
    """Three-conv restoration net with an input-to-output skip connection.

    The 16-bit input quantizer is part of the architecture; every conv
    carries a bias (there is no batch norm to absorb it).
    """
    f = int(desc.get("features", 8))
    input_bits = int(desc.get("input_bits", 16))
    nodes = [
        Node("qin", ActQuant(bits=input_bits, relu=False, bits_fixed=True), ("input",)),
        Node("conv1", Conv2d(3, f, 3, rng=rng), ("qin",)),
        Node("act1", ActQuant(), ("conv1",)),
        Node("drop1", Dropout(0.05), ("act1",)),
        Node("conv2", Conv2d(f, f, 3, rng=rng), ("drop1",)),
        Node("act2", ActQuant(), ("conv2",)),
        Node("conv3", Conv2d(f, 3, 3, rng=rng), ("act2",)),
        Node("add_out", Add(), ("conv3", "qin")),
    ]
    units = [
        QuantUnit("u_conv1", "conv1", "act1", "qin"),
        QuantUnit("u_conv2", "conv2", "act2", "act1"),
        QuantUnit("u_conv3", "conv3", None, "act2"),
    ]
    return Model(dict(desc), nodes, units, "add_out")


_BUILDERS = {
    "mini_resnet": build_mini_resnet,
    "denoise_cnn": build_denoise_cnn,
}


def build_model(desc, seed=0):
    """Instantiate an architecture from its descriptor dict."""
    arch = desc.get("arch")
    if arch not in _BUILDERS:
        raise ValueError(f"unknown architecture {arch!r}; known: {sorted(_BUILDERS)}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA5C]))
    return _BUILDERS[arch](desc, rng)
