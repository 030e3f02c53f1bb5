"""Training engine: gradual quantization schedule, clamp calibration,
optimizers, and the train loop with noise injection.

Layers move through three modes in network order: full precision, then a
noisy stage where a Bernoulli-masked mix of quantized values and uniform
noise stands in for quantization, then quantized with straight-through
gradients. After the last block's noisy stage the whole network trains
fully quantized for the remaining epochs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from intquant import tensor as T
from intquant.nn import (
    ActQuant,
    Dropout,
    Flatten,
    ForwardCtx,
    GlobalAvgPool,
    LayerMode,
    MaxPool2d,
    Model,
)
from intquant.quantizer import (
    ClampParams,
    QuantSpec,
    act_delta,
    init_act_clamp_pooled,
    init_weight_clamp,
    weight_delta,
)

__all__ = [
    "LayerMode",
    "GradualSchedule",
    "TrainConfig",
    "ConfigError",
    "DivergenceError",
    "build_schedule",
    "apply_stage",
    "attach_quant",
    "calibrate_clamps",
    "train",
    "evaluate",
    "SGD",
    "Adam",
]

CLAMP_FLOOR = 1e-6


class ConfigError(ValueError):
    """Invalid training or quantization configuration."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, stage, layer, epoch):
        self.stage = stage
        self.layer = layer
        self.epoch = epoch
        where = f"stage {stage}" if stage is not None else "full-precision training"
        super().__init__(
            f"loss diverged at epoch {epoch} ({where}); first non-finite node: {layer}"
        )


# ---------------------------------------------------------------------------
# schedule


@dataclass
class GradualSchedule:
    """Ordered partition of the quantizable units into contiguous blocks.

    At stage i, blocks before i are quantized, block i is noisy, and later
    blocks stay at full precision; stage == len(blocks) means everything is
    quantized (the fine-tuning phase).
    """

    blocks: list
    epochs_per_stage: int
    current_stage: int = 0

    @property
    def n_stages(self):
        return len(self.blocks)

    def mode_of(self, unit_name):
        for i, block in enumerate(self.blocks):
            if unit_name in block:
                if i < self.current_stage:
                    return LayerMode.QUANTIZED
                if i == self.current_stage:
                    return LayerMode.NOISY
                return LayerMode.FULL_PRECISION
        return LayerMode.FULL_PRECISION

    def advance(self):
        self.current_stage = min(self.current_stage + 1, self.n_stages)


def build_schedule(model, n_blocks=None, epochs_per_stage=1):
    """Split the active units into contiguous blocks in forward order.

    Defaults to one block per unit. When the count does not divide evenly,
    earlier blocks take the extra unit.
    """
    units = list(model.active_units)
    if not units:
        raise ConfigError("no quantizable units; call attach_quant first")
    n = len(units) if n_blocks is None else int(n_blocks)
    if n < 1 or n > len(units):
        raise ConfigError(f"block count {n} invalid for {len(units)} quantizable units")
    if epochs_per_stage < 1:
        raise ConfigError("epochs_per_stage must be positive")
    base, rem = divmod(len(units), n)
    blocks, pos = [], 0
    for i in range(n):
        size = base + (1 if i < rem else 0)
        blocks.append(units[pos : pos + size])
        pos += size
    return GradualSchedule(blocks, epochs_per_stage)


def apply_stage(model, schedule):
    """Set every layer's mode from the schedule; returns the mode map.

    Units outside the active set (skipped first/last layers) are always
    full precision. Activation quantizers follow the unit that drives
    them: clamp-only while noisy, quantizing once the unit is quantized.
    """
    act_mode = {
        LayerMode.FULL_PRECISION: "fp",
        LayerMode.NOISY: "clamp",
        LayerMode.QUANTIZED: "quant",
    }
    modes = {}
    for unit in model.quant_units:
        mode = (
            schedule.mode_of(unit.name)
            if unit.name in model.active_units
            else LayerMode.FULL_PRECISION
        )
        modes[unit.name] = mode
        model.layer(unit.linear).mode = mode
    for act_name, driver in model.act_driver.items():
        model.layer(act_name).mode = act_mode[modes[driver]]
    return modes


# ---------------------------------------------------------------------------
# attaching a quantization spec and calibrating clamps


def attach_quant(model, spec, skip_first_last=True):
    """Install bitwidths on the model and compute the active unit set.

    With ``skip_first_last`` the first and last units stay full precision
    forever. Each active unit drives its own activation quantizer; where a
    unit's input comes from an activation no active unit owns (the
    boundary after a skipped first layer, or the raw input), that
    quantizer is driven by the consuming unit.
    """
    units = list(model.quant_units)
    if skip_first_last:
        if len(units) <= 2:
            raise ConfigError("skip_first_last leaves no quantizable units")
        units = units[1:-1]
    model.quant_spec = spec
    model.skip_first_last = skip_first_last
    model.active_units = [u.name for u in units]
    driver = {}
    for u in units:
        if u.act is not None:
            driver[u.act] = u.name
    for u in units:
        if u.in_act is not None and u.in_act not in driver:
            driver[u.in_act] = u.name
    model.act_driver = driver
    for u in units:
        lin = model.layer(u.linear)
        lin.weight_bits = spec.weight_bits
        lin.bias_bits = spec.bias_bits
        lin.mask_prob = spec.mask_prob
    for act_name in driver:
        act = model.layer(act_name)
        if not act.bits_fixed:
            act.bits = spec.act_bits
    return model


def input_scale(model, unit):
    """Real scale of the codes feeding ``unit``'s linear op.

    Walks back from the conv/linear input through scale-preserving nodes
    (max pool, dropout, flatten) and scale-dividing ones (average pool)
    until the producing activation quantizer.
    """
    factor = 1.0
    name = model.nodes_by_name[unit.linear].inputs[0]
    while name != "input":
        layer = model.layer(name)
        node = model.nodes_by_name[name]
        if isinstance(layer, ActQuant):
            if layer.c_a is None or layer.bits is None:
                raise ConfigError(f"activation {name} has no calibrated clamp")
            return act_delta(float(layer.c_a.data), layer.bits) * factor
        if isinstance(layer, (MaxPool2d, Dropout, Flatten)):
            name = node.inputs[0]
            continue
        if isinstance(layer, GlobalAvgPool):
            if layer.last_divisor is None:
                raise ConfigError("average pool divisor unknown; run a forward pass first")
            factor /= layer.last_divisor
            name = node.inputs[0]
            continue
        raise ConfigError(f"cannot derive an input scale through node {name}")
    raise ConfigError(f"unit {unit.name} is fed by the raw input; quantize it first")


def unit_bias_clamp(model, unit, spec):
    """Bias clamp of one unit: input scale * weight scale * top bias code."""
    lin = model.layer(unit.linear)
    w_scale = weight_delta(lin.weight_clamp, spec.weight_bits)
    return input_scale(model, unit) * w_scale * (2 ** (spec.bias_bits - 1) - 1)


def refresh_bias_clamps(model):
    """Recompute every derived bias clamp (call whenever a clamp moves)."""
    spec = model.quant_spec
    for name in model.active_units:
        unit = model.unit(name)
        lin = model.layer(unit.linear)
        if lin.bias is not None and lin.weight_clamp is not None:
            lin.bias_clamp = unit_bias_clamp(model, unit, spec)


def calibrate_clamps(model, batches):
    """Initialize all clamps from statistics of the full-precision model.

    Weight clamps come from each layer's weights; activation clamps from
    the pre-clamp activations over the calibration batches, pooled with
    running sums. Bias clamps are then derived. Returns the per-unit clamp
    values.
    """
    spec = model.quant_spec
    if spec is None:
        raise ConfigError("attach_quant must run before calibration")
    for name in model.active_units:
        unit = model.unit(name)
        lin = model.layer(unit.linear)
        lin.weight_clamp = init_weight_clamp(lin.weight.data, spec.beta)

    producers = {
        act: model.nodes_by_name[act].inputs[0] for act in model.act_driver
    }
    stats = {act: [0, 0.0, 0.0] for act in producers}
    ctx = ForwardCtx(training=False)
    n_batches = 0
    with T.no_grad():
        for x in batches:
            n_batches += 1
            _, vals = model.forward(np.asarray(x, dtype=np.float64), ctx,
                                    collect=set(producers.values()) | {"input"})
            for act, producer in producers.items():
                a = vals[producer].data
                s = stats[act]
                s[0] += a.size
                s[1] += float(a.sum())
                s[2] += float((a * a).sum())
    if n_batches == 0:
        raise ConfigError("calibration requires at least one batch")

    for act, (count, total, total_sq) in stats.items():
        c = init_act_clamp_pooled(count, total, total_sq, spec.alpha)
        model.layer(act).c_a = T.Tensor(np.asarray(c), requires_grad=True)
    refresh_bias_clamps(model)

    out = {}
    for name in model.active_units:
        unit = model.unit(name)
        lin = model.layer(unit.linear)
        own_act = model.layer(unit.act).c_a if unit.act is not None else None
        out[name] = ClampParams(
            weight_clamp=lin.weight_clamp,
            act_clamp=float(own_act.data) if own_act is not None else None,
            bias_clamp=lin.bias_clamp,
        )
    return out


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    """SGD with momentum; ``no_decay`` names are exempt from weight decay."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0, no_decay=()):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and name not in self.no_decay:
                g = g + self.weight_decay * p.data
            v = self.momentum * self.velocity[name] + g
            self.velocity[name] = v
            p.data = p.data - self.lr * v


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, no_decay=()):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.t = 0

    zero_grad = SGD.zero_grad

    def step(self):
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and name not in self.no_decay:
                g = g + self.weight_decay * p.data
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * (g * g)
            mhat = self.m[name] / (1 - self.b1**self.t)
            vhat = self.v[name] / (1 - self.b2**self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 100
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 4e-5
    optimizer: str = "sgd"
    seed: int = 0
    quant: QuantSpec | None = None
    skip_first_last: bool = True
    enable_noise_gradual: bool = True
    enable_clamp_learning: bool = True
    epochs_per_stage: int = 1
    n_blocks: int | None = None
    augment_flips: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def _batch_metric(out, y, task):
    if task == "classification":
        return float((out.data.argmax(axis=1) == y).sum())
    return float(((out.data - y) ** 2).sum()), out.data.size


def evaluate(model, data, task, batch_size=200):
    """Top-1 accuracy (classification) or PSNR in dB (regression)."""
    x, y = data
    ctx = ForwardCtx(training=False)
    correct = 0.0
    sq_err = 0.0
    n_pix = 0
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            out = model.forward(np.asarray(x[i : i + batch_size], dtype=np.float64), ctx)
            if task == "classification":
                correct += float((out.data.argmax(axis=1) == y[i : i + batch_size]).sum())
            else:
                diff = out.data - y[i : i + batch_size]
                sq_err += float((diff * diff).sum())
                n_pix += diff.size
    if task == "classification":
        return correct / len(x)
    return -10.0 * math.log10(sq_err / n_pix)


def _first_nonfinite(model, x, ctx):
    names = [n.name for n in model.nodes]
    with T.no_grad():
        _, vals = model.forward(x, ForwardCtx(training=False), collect=names)
    for name in names:
        if not np.isfinite(vals[name].data).all():
            return name
    return "<loss>"


def _clamp_snapshot(model):
    parts = []
    for name, c in model.clamp_tensors():
        parts.append(f"{name}={float(c.data)!r}")
    return ";".join(parts) if parts else "-"


def train(model, train_set, val_set, cfg, task, log_path=None):
    """Run the training loop; returns the per-epoch metric rows.

    For quantized runs, ``attach_quant`` and ``calibrate_clamps`` must
    already have run. The schedule advances every ``epochs_per_stage``
    epochs; once every block has had its noisy stage, the fully quantized
    network fine-tunes for the remaining epochs. Bias clamps are refreshed
    after every optimizer step so they track the learned activation clamps.
    """
    x_train, y_train = train_set
    n = len(x_train)
    quant = cfg.quant is not None

    schedule = None
    if quant:
        if model.quant_spec is None:
            raise ConfigError("quantized training requires attach_quant + calibrate_clamps")
        schedule = build_schedule(model, cfg.n_blocks, cfg.epochs_per_stage)
        if cfg.enable_noise_gradual:
            if cfg.epochs < schedule.n_stages * cfg.epochs_per_stage:
                raise ConfigError(
                    f"epochs={cfg.epochs} cannot cover {schedule.n_stages} stages "
                    f"of {cfg.epochs_per_stage} epoch(s) plus fine-tuning"
                )
        else:
            schedule.current_stage = schedule.n_stages  # plain STE training

    params = [(name, p) for name, p in model.params() if not name.endswith(".c_a")]
    clamp_names = []
    if quant and cfg.enable_clamp_learning:
        clamps = [(f"{name}.c_a", c) for name, c in model.clamp_tensors()]
        clamp_names = [name for name, _ in clamps]
        params = params + clamps
    opt_cls = SGD if cfg.optimizer == "sgd" else Adam
    if cfg.optimizer == "sgd":
        opt = opt_cls(params, cfg.lr, cfg.momentum, cfg.weight_decay, no_decay=clamp_names)
    else:
        opt = opt_cls(params, cfg.lr, weight_decay=cfg.weight_decay, no_decay=clamp_names)

    ss = np.random.SeedSequence(cfg.seed)
    rng_data, rng_noise, rng_dropout, rng_aug = [
        np.random.default_rng(s) for s in ss.spawn(4)
    ]

    writer = None
    if log_path is not None:
        writer = open(log_path, "w", encoding="utf-8")
        writer.write("# intquant-metrics v1\n")
        writer.write(f"# task={task}\n")
        writer.write(f"# arch={model.descriptor.get('arch', '?')}\n")
        writer.write(f"# seed={cfg.seed}\n")
        if quant:
            s = model.quant_spec
            writer.write(f"# weight_bits={s.weight_bits}\n# act_bits={s.act_bits}\n")
            writer.write(f"# noise_gradual={'on' if cfg.enable_noise_gradual else 'off'}\n")
            writer.write(f"# clamp_learning={'on' if cfg.enable_clamp_learning else 'off'}\n")
        writer.write("# columns: epoch\tstage\tloss\tmetric\tmodes\tclamps\n")

    rows = []
    try:
        for epoch in range(cfg.epochs):
            stage = None
            modes_str = "-"
            if quant:
                if cfg.enable_noise_gradual:
                    schedule.current_stage = min(
                        epoch // cfg.epochs_per_stage, schedule.n_stages
                    )
                stage = schedule.current_stage
                modes = apply_stage(model, schedule)
                modes_str = "".join(
                    {"fp": "F", "noisy": "N", "quant": "Q"}[modes[u].value]
                    for u in model.active_units
                )

            perm = rng_data.permutation(n)
            loss_sum = 0.0
            n_batches = 0
            for start in range(0, n, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                xb = np.array(x_train[idx], dtype=np.float64)
                yb = y_train[idx]
                if cfg.augment_flips:
                    yb = np.array(yb, dtype=np.float64)
                    flip_h = rng_aug.random(len(idx)) < 0.5
                    flip_v = rng_aug.random(len(idx)) < 0.5
                    xb[flip_h] = xb[flip_h, :, :, ::-1]
                    yb[flip_h] = yb[flip_h, :, :, ::-1]
                    xb[flip_v] = xb[flip_v, :, ::-1, :]
                    yb[flip_v] = yb[flip_v, :, ::-1, :]

                ctx = ForwardCtx(training=True, rng_noise=rng_noise, rng_dropout=rng_dropout)
                out = model.forward(xb, ctx)
                if task == "classification":
                    loss = T.softmax_cross_entropy(out, yb)
                else:
                    loss = T.mse_loss(out, yb)
                if not np.isfinite(loss.data):
                    raise DivergenceError(stage, _first_nonfinite(model, xb, ctx), epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                if quant:
                    for _, c in model.clamp_tensors():
                        c.data = np.maximum(c.data, CLAMP_FLOOR)
                    refresh_bias_clamps(model)
                loss_sum += float(loss.data)
                n_batches += 1

            metric = evaluate(model, val_set, task, max(cfg.batch_size, 200))
            row = {
                "epoch": epoch,
                "stage": stage,
                "loss": loss_sum / n_batches,
                "metric": metric,
                "modes": modes_str,
                "clamps": _clamp_snapshot(model) if quant else "-",
            }
            rows.append(row)
            if writer:
                writer.write(
                    f"{epoch}\t{'-' if stage is None else stage}\t{row['loss']!r}\t"
                    f"{metric!r}\t{modes_str}\t{row['clamps']}\n"
                )
                writer.flush()
    finally:
        if writer:
            writer.close()
    return rows
