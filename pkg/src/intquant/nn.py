"""Layers and the named-node model graph used by training and lowering.

A model is an ordered list of nodes; each node names its inputs, so skip
connections are plain extra edges. Quantizable units pair a conv/linear
node with its following activation node; the training engine drives each
unit's mode (full precision, noisy, quantized) and the layers translate
that mode into straight-through-estimator ops built on ``custom_grad``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from intquant import tensor as T
from intquant.quantizer import (
    inject_noise,
    quantize_activations,
    quantize_biases,
    quantize_weights,
)


class LayerMode(enum.Enum):
    FULL_PRECISION = "fp"
    NOISY = "noisy"
    QUANTIZED = "quant"


class GraphError(ValueError):
    """The model graph is malformed for the requested operation."""


@dataclass
class ForwardCtx:
    """Per-forward state: training flag and caller-owned RNG streams."""

    training: bool = False
    rng_noise: np.random.Generator | None = None
    rng_dropout: np.random.Generator | None = None


# ---------------------------------------------------------------------------
# straight-through estimator ops


def ste_quantize_weights(w, c_w, bits):
    """Fake-quantized weights; gradient passes through inside [-c_w, c_w]."""

    def fwd(arr):
        return quantize_weights(arr, c_w, bits)

    def bwd(g, arr):
        return (g * (np.abs(arr) <= c_w),)

    return T.custom_grad(fwd, bwd)(w)


def ste_quantize_biases(b, c_b, bits):
    def fwd(arr):
        return quantize_biases(arr, c_b, bits)

    def bwd(g, arr):
        return (g * (np.abs(arr) <= c_b),)

    return T.custom_grad(fwd, bwd)(b)


def ste_noisy_weights(w, c_w, bits, mask_prob, rng):
    """Bernoulli mix of quantized values and uniform noise, redrawn per call.

    Noisy elements are differentiable identities of the raw weight, so they
    pass gradient everywhere; quantized elements pass only inside the clamp.
    """
    values, mask = inject_noise(w.data, c_w, bits, mask_prob, rng)
    pass_mask = np.where(mask, True, np.abs(w.data) <= c_w)

    def fwd(arr):
        return values

    def bwd(g, arr):
        return (g * pass_mask,)

    return T.custom_grad(fwd, bwd)(w)


def ste_clamp_acts(a, c_a):
    """Clamp to [0, c_a] with the pass-through gradient mask.

    d/da is 1 inside [0, c_a] and 0 outside; d/dc_a is 1 on the saturated
    side (a > c_a), summed over the tensor.
    """

    def fwd(arr, c):
        return np.clip(arr, 0.0, float(c))

    def bwd(g, arr, c):
        cf = float(c)
        da = g * ((arr >= 0.0) & (arr <= cf))
        dc = np.asarray((g * (arr > cf)).sum())
        return da, dc

    return T.custom_grad(fwd, bwd)(a, c_a)


def ste_quantize_acts(a, c_a, bits):
    """Clamped, uniformly quantized activations with STE gradients.

    Forward is the fake-quantized value; backward uses the same masks as
    ``ste_clamp_acts`` (rounding is invisible to the gradient).
    """

    def fwd(arr, c):
        return quantize_activations(arr, float(c), bits)

    def bwd(g, arr, c):
        cf = float(c)
        da = g * ((arr >= 0.0) & (arr <= cf))
        dc = np.asarray((g * (arr > cf)).sum())
        return da, dc

    return T.custom_grad(fwd, bwd)(a, c_a)


# ---------------------------------------------------------------------------
# layers


class Layer:
    def params(self):
        return []

    def forward(self, ctx, *xs):
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, k, stride=1, padding=1, bias=True, rng=None):
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / (in_ch * k * k))
        self.weight = T.Tensor(rng.normal(0.0, std, size=(out_ch, in_ch, k, k)), requires_grad=True)
        self.bias = T.Tensor(np.zeros(out_ch), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding
        # quantization state, installed by the training engine
        self.mode = LayerMode.FULL_PRECISION
        self.weight_bits = None
        self.bias_bits = None
        self.weight_clamp = None
        self.bias_clamp = None
        self.mask_prob = 0.0

    def _effective_params(self, ctx):
        w, b = self.weight, self.bias
        if self.mode == LayerMode.QUANTIZED or (
            self.mode == LayerMode.NOISY and not ctx.training
        ):
            w = ste_quantize_weights(w, self.weight_clamp, self.weight_bits)
            if b is not None and self.bias_clamp is not None:
                b = ste_quantize_biases(b, self.bias_clamp, self.bias_bits)
        elif self.mode == LayerMode.NOISY:
            w = ste_noisy_weights(
                w, self.weight_clamp, self.weight_bits, self.mask_prob, ctx.rng_noise
            )
            if b is not None and self.bias_clamp is not None:
                b = ste_noisy_weights(
                    b, self.bias_clamp, self.bias_bits, self.mask_prob, ctx.rng_noise
                )
        return w, b

    def params(self):
        ps = [("weight", self.weight)]
        if self.bias is not None:
            ps.append(("bias", self.bias))
        return ps

    def forward(self, ctx, x):
        w, b = self._effective_params(ctx)
        return T.conv2d(x, w, b, stride=self.stride, padding=self.padding)


class Linear(Layer):
    def __init__(self, in_f, out_f, bias=True, rng=None):
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / in_f)
        self.weight = T.Tensor(rng.normal(0.0, std, size=(out_f, in_f)), requires_grad=True)
        self.bias = T.Tensor(np.zeros(out_f), requires_grad=True) if bias else None
        self.mode = LayerMode.FULL_PRECISION
        self.weight_bits = None
        self.bias_bits = None
        self.weight_clamp = None
        self.bias_clamp = None
        self.mask_prob = 0.0

    _effective_params = Conv2d._effective_params
    params = Conv2d.params

    def forward(self, ctx, x):
        w, b = self._effective_params(ctx)
        return T.linear(x, w, b)


class BatchNorm2d(Layer):
    def __init__(self, ch, eps=1e-5, momentum=0.1):
        self.gamma = T.Tensor(np.ones(ch), requires_grad=True)
        self.beta = T.Tensor(np.zeros(ch), requires_grad=True)
        self.running_mean = np.zeros(ch)
        self.running_var = np.ones(ch)
        self.eps = eps
        self.momentum = momentum

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def forward(self, ctx, x):
        if ctx.training:
            out, mean, var = T.batch_norm2d(x, self.gamma, self.beta, self.eps)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
            return out
        scale = self.gamma.data / np.sqrt(self.running_var + self.eps)
        shift = self.beta.data - self.running_mean * scale
        return T.channel_affine(x, scale, shift)


class ActQuant(Layer):
    """Clamped-ReLU activation with an optional uniform quantizer.

    In full-precision mode this is a plain ReLU (or the identity for input
    stubs); in clamp mode the clamp is active but values stay continuous;
    in quant mode the output is fake-quantized to ``bits`` levels. The
    clamp is a trainable scalar once calibration has set it.
    """

    def __init__(self, bits=None, relu=True, bits_fixed=False):
        self.bits = bits
        self.relu = relu
        self.bits_fixed = bits_fixed
        self.c_a = None  # set by calibration, then trainable
        self.mode = "fp"  # 'fp' | 'clamp' | 'quant'

    def params(self):
        return [("c_a", self.c_a)] if self.c_a is not None else []

    def forward(self, ctx, x):
        if self.mode == "fp":
            return T.relu(x) if self.relu else x
        if self.mode == "clamp":
            return ste_clamp_acts(x, self.c_a)
        return ste_quantize_acts(x, self.c_a, self.bits)


class ReLU(Layer):
    def forward(self, ctx, x):
        return T.relu(x)


class MaxPool2d(Layer):
    def __init__(self, k=2):
        self.k = k

    def forward(self, ctx, x):
        return T.max_pool2d(x, self.k)


class GlobalAvgPool(Layer):
    def __init__(self):
        self.last_divisor = None

    def forward(self, ctx, x):
        self.last_divisor = x.data.shape[2] * x.data.shape[3]
        return T.global_avg_pool(x)


class Flatten(Layer):
    def forward(self, ctx, x):
        return T.flatten(x)


class Dropout(Layer):
    def __init__(self, p):
        self.p = p

    def forward(self, ctx, x):
        if not ctx.training or self.p <= 0.0:
            return x
        return T.dropout(x, self.p, ctx.rng_dropout)


class Add(Layer):
    def forward(self, ctx, a, b):
        return T.add(a, b)


# ---------------------------------------------------------------------------
# model graph


@dataclass
class Node:
    name: str
    layer: Layer
    inputs: tuple


@dataclass
class QuantUnit:
    """A quantizable linear op, its output activation, and the activation
    quantizer feeding its input (used for the bias scale and lowering)."""

    name: str
    linear: str
    act: str | None
    in_act: str | None


@dataclass
class Model:
    descriptor: dict
    nodes: list
    quant_units: list
    output: str
    nodes_by_name: dict = field(init=False)
    active_units: list = field(default_factory=list)  # set by attach_quant
    act_driver: dict = field(default_factory=dict)  # act node -> driving unit
    quant_spec: object = None
    skip_first_last: bool = True

    def __post_init__(self):
        self.nodes_by_name = {n.name: n for n in self.nodes}
        seen = {"input"}
        for n in self.nodes:
            for inp in n.inputs:
                if inp not in seen:
                    raise GraphError(f"node {n.name} consumes unknown input {inp}")
            if n.name in seen:
                raise GraphError(f"duplicate node name {n.name}")
            seen.add(n.name)

    def layer(self, name):
        return self.nodes_by_name[name].layer

    def unit(self, name):
        for u in self.quant_units:
            if u.name == name:
                return u
        raise KeyError(name)

    def forward(self, x, ctx=None, collect=None):
        """Evaluate the graph; ``collect`` is an iterable of node names whose
        output tensors are also returned (use "input" for the model input)."""
        ctx = ctx or ForwardCtx()
        x = x if isinstance(x, T.Tensor) else T.Tensor(x)
        values = {"input": x}
        for node in self.nodes:
            args = [values[i] for i in node.inputs]
            values[node.name] = node.layer.forward(ctx, *args)
        out = values[self.output]
        if collect is None:
            return out
        return out, {k: values[k] for k in collect}

    def params(self):
        """(qualified name, tensor) pairs for every trainable parameter,
        activation clamps included, in graph order."""
        out = []
        for node in self.nodes:
            for pname, p in node.layer.params():
                out.append((f"{node.name}.{pname}", p))
        return out

    def clamp_tensors(self):
        return [
            (n.name, n.layer.c_a)
            for n in self.nodes
            if isinstance(n.layer, ActQuant) and n.layer.c_a is not None
        ]

    def state_arrays(self):
        """All persistent numeric state, keyed by qualified name."""
        arrays = {}
        for node in self.nodes:
            for pname, p in node.layer.params():
                arrays[f"{node.name}.{pname}"] = p.data
            if isinstance(node.layer, BatchNorm2d):
                arrays[f"{node.name}.running_mean"] = node.layer.running_mean
                arrays[f"{node.name}.running_var"] = node.layer.running_var
        return arrays

    def load_state_arrays(self, arrays):
        for node in self.nodes:
            if isinstance(node.layer, ActQuant):
                key = f"{node.name}.c_a"
                if key in arrays and node.layer.c_a is None:
                    node.layer.c_a = T.Tensor(arrays[key], requires_grad=True)
        for node in self.nodes:
            for pname, p in node.layer.params():
                key = f"{node.name}.{pname}"
                if key not in arrays:
                    raise GraphError(f"checkpoint is missing parameter {key}")
                if p.data.shape != arrays[key].shape:
                    raise GraphError(f"shape mismatch for {key}")
                p.data = arrays[key].astype(np.float64)
            if isinstance(node.layer, BatchNorm2d):
                node.layer.running_mean = arrays[f"{node.name}.running_mean"].astype(np.float64)
                node.layer.running_var = arrays[f"{node.name}.running_var"].astype(np.float64)


def fold_batchnorm(model):
    """Fold every conv+BN pair into the conv's weights and bias.

    Returns a new model without BN nodes; the source model is untouched.
    Uses running statistics, so fold only models meant for inference.
    """
    import copy

    model = copy.deepcopy(model)
    bn_nodes = [n for n in model.nodes if isinstance(n.layer, BatchNorm2d)]
    replaced = {}
    for bn in bn_nodes:
        src = bn.inputs[0]
        conv_node = model.nodes_by_name.get(src)
        if conv_node is None or not isinstance(conv_node.layer, Conv2d):
            raise GraphError(f"batch norm {bn.name} is not preceded by a convolution")
        conv = conv_node.layer
        scale = bn.layer.gamma.data / np.sqrt(bn.layer.running_var + bn.layer.eps)
        shift = bn.layer.beta.data - bn.layer.running_mean * scale
        conv.weight.data = conv.weight.data * scale[:, None, None, None]
        if conv.bias is None:
            conv.bias = T.Tensor(shift, requires_grad=True)
        else:
            conv.bias.data = conv.bias.data * scale + shift
        replaced[bn.name] = src
    nodes = []
    for n in model.nodes:
        if n.name in replaced:
            continue
        nodes.append(
            Node(n.name, n.layer, tuple(replaced.get(i, i) for i in n.inputs))
        )
    out = replaced.get(model.output, model.output)
    folded = Model(model.descriptor, nodes, model.quant_units, out)
    folded.active_units = list(model.active_units)
    folded.act_driver = dict(model.act_driver)
    folded.quant_spec = model.quant_spec
    folded.skip_first_last = model.skip_first_last
    return folded
