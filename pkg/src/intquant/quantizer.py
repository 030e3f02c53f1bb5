"""Pointwise quantization math: clamps, uniform quantizers, noise injection.

Everything here is a pure function over numpy arrays (or scalars). The
training-time wrappers that attach straight-through gradients live in
``nn``; the integer execution path lives in ``intinfer``. Both reuse these
functions so the float and integer paths round identically.

Rounding is half away from zero throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ParameterError(ValueError):
    """A quantization parameter is out of its valid range."""


class InitializationError(ValueError):
    """Statistics-based clamp initialization produced a degenerate value."""


def round_half_away(x):
    """Round to nearest integer, ties away from zero (unlike np.round)."""
    x = np.asarray(x, dtype=np.float64)
    return np.trunc(x + np.copysign(0.5, x))


@dataclass(frozen=True)
class QuantSpec:
    """Per-layer bitwidths and clamp-initialization hyperparameters.

    ``alpha`` scales the activation-clamp init (mean + alpha * std of
    calibration activations), ``beta`` the weight-clamp init, and
    ``mask_prob`` is the Bernoulli parameter of the noise-injection mask.
    """

    weight_bits: int = 4
    act_bits: int = 4
    bias_bits: int = 16
    alpha: float = 5.0
    beta: float = 3.0
    mask_prob: float = 0.05

    def __post_init__(self):
        if not 2 <= self.weight_bits <= 16:
            raise ParameterError(f"weight_bits must be in [2, 16], got {self.weight_bits}")
        if not 1 <= self.act_bits <= 16:
            raise ParameterError(f"act_bits must be in [1, 16], got {self.act_bits}")
        if not 2 <= self.bias_bits <= 32:
            raise ParameterError(f"bias_bits must be in [2, 32], got {self.bias_bits}")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ParameterError(f"mask_prob must be in [0, 1], got {self.mask_prob}")


@dataclass
class ClampParams:
    """Clamp values of one layer: fixed weight clamp, learned activation
    clamp, and the bias clamp derived from both (recomputed whenever the
    activation clamp moves)."""

    weight_clamp: float
    act_clamp: float
    bias_clamp: float | None = None


def clamp_sym(w, c):
    """Symmetric clamp to [-c, c]."""
    if c <= 0:
        raise ParameterError(f"clamp must be positive, got {c}")
    return np.clip(np.asarray(w, dtype=np.float64), -c, c)


def weight_delta(c_w, bits_w):
    """Bin size of the symmetric weight grid: c_w / (2^(bits-1) - 1)."""
    if bits_w < 2:
        raise ParameterError(f"weight bits must be >= 2, got {bits_w}")
    return c_w / (2 ** (bits_w - 1) - 1)


def act_delta(c_a, bits_a):
    """Bin size of the one-sided activation grid: c_a / (2^bits - 1)."""
    if bits_a < 1:
        raise ParameterError(f"activation bits must be >= 1, got {bits_a}")
    return c_a / (2**bits_a - 1)


def quantize_weights(w, c_w, bits_w):
    """Clamp to [-c_w, c_w] and round onto the symmetric uniform grid.

    Output takes at most 2^bits - 1 distinct values, symmetric about zero.
    The top level reproduces c_w exactly.
    """
    if c_w <= 0:
        raise ParameterError(f"weight clamp must be positive, got {c_w}")
    levels = 2 ** (bits_w - 1) - 1
    k = round_half_away(clamp_sym(w, c_w) * (levels / c_w))
    return (k / levels) * c_w


def quantize_activations(a, c_a, bits_a):
    """Clamp to [0, c_a] and round onto the 2^bits-level uniform grid.

    The zero code is exact and the top code reproduces c_a exactly.
    """
    if c_a <= 0:
        raise ParameterError(f"activation clamp must be positive, got {c_a}")
    if bits_a < 1:
        raise ParameterError(f"activation bits must be >= 1, got {bits_a}")
    levels = 2**bits_a - 1
    a_c = np.clip(np.asarray(a, dtype=np.float64), 0.0, c_a)
    k = round_half_away(a_c * (levels / c_a))
    return (k / levels) * c_a


def bias_clamp(c_a, c_w, bits_a, bits_w, bits_b):
    """Bias clamp: (activation scale) * (weight scale) * (2^(bits_b-1) - 1).

    With this clamp the bias grid spacing equals the product of the
    activation and weight scales, so quantized biases land exactly on the
    integer accumulator grid.
    """
    if c_a <= 0 or c_w <= 0:
        raise ParameterError("clamps must be positive")
    act_scale = c_a / (2**bits_a - 1)
    w_scale = c_w / (2 ** (bits_w - 1) - 1)
    return act_scale * w_scale * (2 ** (bits_b - 1) - 1)


def quantize_biases(b, c_b, bits_b):
    """Biases are clamped and quantized like weights, on their own grid."""
    return quantize_weights(b, c_b, bits_b)


def init_weight_clamp(w, beta):
    """mean + beta * std over all weights (population std)."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise InitializationError("cannot initialize a clamp from an empty tensor")
    c = float(w.mean() + beta * w.std())
    if c <= 0:
        raise InitializationError(
            f"weight clamp init is non-positive ({c:.6g}); degenerate layer statistics"
        )
    return c


def init_act_clamp(samples, alpha):
    """mean + alpha * std over calibration activations (population std)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise InitializationError("cannot initialize a clamp from empty statistics")
    c = float(samples.mean() + alpha * samples.std())
    if c <= 0:
        raise InitializationError(
            f"activation clamp init is non-positive ({c:.6g}); degenerate statistics"
        )
    return c


def init_act_clamp_pooled(count, total, total_sq, alpha):
    """Clamp init from pooled running statistics (count, sum, sum of squares)."""
    if count <= 0:
        raise InitializationError("cannot initialize a clamp from empty statistics")
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    c = float(mean + alpha * np.sqrt(var))
    if c <= 0:
        raise InitializationError(
            f"activation clamp init is non-positive ({c:.6g}); degenerate statistics"
        )
    return c


def inject_noise(w, c_w, bits_w, mask_prob, rng):
    """Bernoulli-masked mix of quantized values and uniform noise.

    Where the mask is 0 the element is quantized; where it is 1 the raw
    value minus a fresh uniform draw in [-delta/2, delta/2] is used. The
    mask and the noise are redrawn on every call; ``rng`` is either a seed
    or a numpy Generator so the caller owns reproducibility.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    w = np.asarray(w, dtype=np.float64)
    delta = weight_delta(c_w, bits_w)
    mask = rng.random(w.shape) < mask_prob
    noise = rng.uniform(-delta / 2.0, delta / 2.0, size=w.shape)
    return np.where(mask, w - noise, quantize_weights(w, c_w, bits_w)), mask
