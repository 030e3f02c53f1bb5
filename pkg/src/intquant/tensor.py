"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: only the operations needed by the quantized-training
experiments exist. Gradients flow through a dynamic graph of parent links;
``custom_grad`` lets callers attach arbitrary backward rules, which is how
the straight-through estimators are built.

All data is float64. Forward passes are deterministic: the same inputs and
parameters produce bit-identical outputs.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d array of float64 values with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Reverse-mode pass seeding ``grad`` (ones for a scalar output).

        Visits every node that influences this tensor exactly once, in
        reverse topological order. Forward values are never mutated.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            gs = node._backward(node.grad)
            for parent, g in zip(node._parents, gs):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root):
    """Post-order over the graph reachable from ``root`` (iterative DFS)."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data, parents, backward):
    """Wrap an op result, attaching the graph only when gradients flow."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / reshaping ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), backward)


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.data.shape
    data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(orig),)

    return _make(data, (a,), backward)


def flatten(a):
    a = as_tensor(a)
    return reshape(a, (a.data.shape[0], -1))


def tsum(a):
    a = as_tensor(a)
    data = np.asarray(a.data.sum())

    def backward(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(data, (a,), backward)


def tmean(a):
    a = as_tensor(a)
    data = np.asarray(a.data.mean())
    n = a.data.size

    def backward(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _make(data, (a,), backward)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), backward)


def linear(x, w, b=None):
    """x @ w.T + b with w of shape (out, in)."""
    out = matmul(x, transpose(w))
    if b is not None:
        out = add(out, b)
    return out


def transpose(a):
    a = as_tensor(a)

    def backward(g):
        return (g.T,)

    return _make(a.data.T, (a,), backward)


# ---------------------------------------------------------------------------
# convolution and pooling (NCHW layout, OIHW kernels)


def _im2col(xd, kh, kw, stride, padding):
    """Lower the padded input to (N, C*KH*KW, OH*OW) patch columns.

    Built with plain slice copies (no axis reordering), which is the
    fastest gather numpy offers here; the layout feeds batched matmul
    directly.
    """
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, oh, ow))
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride]
    return cols, oh, ow


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of NCHW input with OIHW kernel plus bias.

    Implemented as im2col + batched matmul; the patch columns are kept for
    the backward pass, which is two matmuls plus a column-to-image scatter.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and OIHW kernel")
    if x.data.shape[1] != w.data.shape[1]:
        raise DimensionError(
            f"channel mismatch: input has {x.data.shape[1]}, kernel expects {w.data.shape[1]}"
        )
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (w.data.shape[0],):
            raise DimensionError("bias length must equal output channel count")

    n, c, h, wd = x.data.shape
    o, _, kh, kw = w.data.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    cols2 = cols.reshape(n, c * kh * kw, oh * ow)
    wmat = w.data.reshape(o, c * kh * kw)
    out = np.matmul(wmat[None], cols2).reshape(n, o, oh, ow)
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        g3 = g.reshape(n, o, oh * ow)
        gw = np.matmul(g3, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, kh, kw)
        gcols = np.matmul(wmat.T[None], g3).reshape(n, c, kh, kw, oh, ow)
        gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += (
                    gcols[:, :, u, v]
                )
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def max_pool2d(x, k=2):
    """Non-overlapping k x k max pooling (stride = k)."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise DimensionError(f"spatial extent {h}x{w} not divisible by pool size {k}")
    oh, ow = h // k, w // k
    blocks = x.data.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, oh, ow, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (x,), backward)


def global_avg_pool(x):
    """Mean over the spatial dimensions, (N, C, H, W) -> (N, C)."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy(),)

    return _make(out, (x,), backward)


def batch_norm2d(x, gamma, beta, eps=1e-5):
    """Per-channel batch normalization (training statistics).

    Returns (out, batch_mean, batch_var); variance is the population form,
    which the caller uses to update running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    mean = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data[None, :, None, None]
        s1 = gxhat.sum(axis=(0, 2, 3))
        s2 = (gxhat * xhat).sum(axis=(0, 2, 3))
        gx = (
            inv[None, :, None, None]
            / m
            * (m * gxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None])
        )
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward), mean, var


def channel_affine(x, scale, shift):
    """Per-channel x * scale + shift with constant coefficients (eval-mode BN)."""
    x = as_tensor(x)
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    out = x.data * scale[None, :, None, None] + shift[None, :, None, None]

    def backward(g):
        return (g * scale[None, :, None, None],)

    return _make(out, (x,), backward)


def dropout(x, p, rng):
    """Inverted dropout; caller supplies the RNG and only calls in training."""
    x = as_tensor(x)
    keep = rng.random(x.data.shape) >= p
    factor = keep / (1.0 - p)
    out = x.data * factor

    def backward(g):
        return (g * factor,)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of logits (N, K) against integer labels (N,)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n = logits.data.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    lse = np.log(exp.sum(axis=1)) + logits.data.max(axis=1)
    loss = np.asarray((lse - logits.data[np.arange(n), labels]).mean())

    def backward(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return _make(loss, (logits,), backward)


def mse_loss(pred, target):
    """Mean squared error against a constant target."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    diff = pred.data - target
    loss = np.asarray((diff * diff).mean())

    def backward(g):
        return (g * 2.0 * diff / diff.size,)

    return _make(loss, (pred,), backward)


# ---------------------------------------------------------------------------
# custom gradients


def custom_grad(forward_fn, backward_fn):
    """Build an op whose backward rule is supplied by the caller.

    ``forward_fn(*arrays) -> array`` runs on the raw input arrays.
    ``backward_fn(upstream, *arrays) -> tuple`` maps the upstream gradient
    to one gradient array (or None) per input, regardless of the true
    derivative of the forward function.
    """

    def op(*inputs):
        tensors = [as_tensor(t) for t in inputs]
        arrays = [t.data for t in tensors]
        out = np.asarray(forward_fn(*arrays), dtype=np.float64)

        def backward(g):
            gs = backward_fn(g, *arrays)
            if not isinstance(gs, tuple):
                gs = (gs,)
            return gs

        return _make(out, tuple(tensors), backward)

    return op
