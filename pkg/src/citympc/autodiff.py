"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: every operation records its parents and a backward closure on
the produced tensor; ``backward`` walks the graph once in reverse topological
order and accumulates gradients additively across fan-out.  The operator set
is exactly what the model needs; nothing here is generic ML-framework
machinery.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ConfigError

# When enabled, every op asserts its output is finite.  Kept off by default
# for speed; tests and the training NaN guard flip it on.
debug_nan_checks = False


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 4:
            raise ConfigError(f"tensors support up to 4 axes, got {self.data.ndim}")
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        if debug_nan_checks and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values produced by an op")

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    def detach(self) -> "Tensor":
        """Stop-gradient copy; backward through it contributes exactly zero."""
        return Tensor(self.data.copy())

    def __getitem__(self, key):
        return tslice(self, key)

    # convenience arithmetic
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _op(data, parents, backward_fn) -> Tensor:
    return Tensor(data, parents=tuple(parents), backward_fn=backward_fn)


def _check_broadcast(a: Tensor, b: Tensor, name: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _op(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))
    return _op(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _op(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        _accumulate(a, g * c)
    return _op(a.data * c, (a,), bwd)


def add_const(a: Tensor, c) -> Tensor:
    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
    return _op(a.data + c, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                   np.exp(a.data) / (1.0 + np.exp(a.data)))

    def bwd(g):
        _accumulate(a, g * out * (1.0 - out))
    return _op(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        _accumulate(a, g * (1.0 - out * out))
    return _op(out, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact erf form: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = x * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        _accumulate(a, g * (cdf + x * pdf))
    return _op(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * out)
    return _op(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, g / a.data)
    return _op(np.log(a.data), (a,), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with straight-zero gradient outside [lo, hi]."""
    mask = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        _accumulate(a, g * mask)
    return _op(np.clip(a.data, lo, hi), (a,), bwd)


# ------------------------------------------------------------------ structure

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ConfigError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        # promote vectors to matrices so one code path covers every case
        ad = a.data[None, :] if a.data.ndim == 1 else a.data
        bd = b.data[:, None] if b.data.ndim == 1 else b.data
        gd = g
        if a.data.ndim == 1:
            gd = np.expand_dims(gd, -2)
        if b.data.ndim == 1:
            gd = np.expand_dims(gd, -1)
        ga = gd @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ gd
        if a.data.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + (ga.shape[-1],))
        if b.data.ndim == 1:
            gb = gb.reshape(gb.shape[:-1])
        _accumulate(a, _unbroadcast(np.asarray(ga), a.shape))
        _accumulate(b, _unbroadcast(np.asarray(gb), b.shape))
    return _op(out, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        _accumulate(a, g.reshape(a.shape))
    return _op(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axis1: int, axis2: int) -> Tensor:
    def bwd(g):
        _accumulate(a, np.swapaxes(g, axis1, axis2))
    return _op(np.swapaxes(a.data, axis1, axis2), (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bwd(g):
        start = 0
        for t, size in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + size)
            _accumulate(t, g[tuple(idx)])
            start += size
    return _op(out, tuple(tensors), bwd)


def tslice(a: Tensor, key) -> Tensor:
    def bwd(g):
        full = np.zeros_like(a.data)
        # add.at accumulates over repeated fancy indices instead of overwriting
        np.add.at(full, key, g)
        _accumulate(a, full)
    return _op(a.data[key], (a,), bwd)


def masked_select(a: Tensor, mask) -> Tensor:
    """Select rows along axis 0 where the boolean mask is true."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[0] != a.shape[0]:
        raise ConfigError(f"masked_select: mask length {mask.shape[0]} vs axis {a.shape[0]}")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[mask] = g
        _accumulate(a, full)
    return _op(a.data[mask], (a,), bwd)


# ----------------------------------------------------------------- reductions

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, a.shape).copy())
    return _op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / count, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg / count, a.shape).copy())
    return _op(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


# ------------------------------------------------------- normalization layers

def softmax(a: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(a, out * (g - dot))
    return _op(out, (a,), bwd)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis (affine applied by the caller)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = (a.data - mu) * inv
    n = a.shape[-1]

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (g - gm - out * gy))
        _ = n
    return _op(out, (a,), bwd)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Unit L2 norm over the last axis."""
    norm = np.sqrt((a.data ** 2).sum(axis=-1, keepdims=True) + eps)
    out = a.data / norm

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(a, (g - out * dot) / norm)
    return _op(out, (a,), bwd)


# -------------------------------------------------------------------- engine

def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss; fills .grad on every leaf."""
    if loss.data.size != 1:
        raise ConfigError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
