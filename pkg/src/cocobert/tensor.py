"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable op builds an output ``Tensor`` that remembers its
parents and a backward closure.  ``backward`` linearises the graph into a
``Tape`` (topological order) and walks it once in reverse.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

# tanh-approximation GELU constants
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run a block without recording anything for differentiation."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- tape -------------------------------------------------------------------


class Tape:
    """Topologically ordered record of the ops that produced a tensor."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if id(p) not in seen and p._backward is not None:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
            return
        raise RuntimeError("loss does not depend on any tensor requiring grad")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        # the closure routes gradient into parents via _route
        node._backward(g, grads)


def _route(grads: dict, t: Tensor, g: np.ndarray) -> None:
    """Send ``g`` to ``t``: interior nodes buffer it, leaves accumulate it."""
    if not t.requires_grad:
        return
    if t._backward is None:
        _accumulate(t, g)
        return
    prev = grads.get(id(t))
    if prev is None:
        grads[id(t)] = np.array(g, dtype=DTYPE, copy=True)
    else:
        prev += g


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, grads):
        _route(grads, a, _unbroadcast(g, a.shape))
        _route(grads, b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, grads):
        _route(grads, a, _unbroadcast(g, a.shape))
        _route(grads, b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, grads):
        if a.requires_grad:
            _route(grads, a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _route(grads, b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g, grads):
        if a.requires_grad:
            _route(grads, a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _route(grads, b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g, grads: _route(grads, a, -g))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g, grads: _route(grads, a, g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g, grads: _route(grads, a, g / a.data))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g, grads: _route(grads, a, g * 0.5 / out))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g, grads: _route(grads, a, g * (1.0 - out * out)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g, grads: _route(grads, a, g * pos))


def softplus(a) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, (a,), lambda g, grads: _route(grads, a, g * sig))


def gelu(a) -> Tensor:
    """0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    a = as_tensor(a)
    x = a.data
    inner = GELU_C * (x + GELU_A * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g, grads):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _route(grads, a, g * d)

    return _make(out, (a,), bw)


# -- reductions and shape ops -----------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g, grads):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _route(grads, a, np.broadcast_to(g, a.shape))

    return _make(out, (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g, grads: _route(grads, a, g.reshape(a.shape)))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(
        np.transpose(a.data, axes), (a,), lambda g, grads: _route(grads, a, np.transpose(g, inv))
    )


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in parts)

    def bw(g, grads):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _route(grads, a, full)

    return _make(a.data[idx], (a,), bw)


def take_rows(table, ids) -> Tensor:
    """Gather rows of a 2-D table; backward scatters with accumulation."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g, grads):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _route(grads, table, full)

    return _make(table.data[ids], (table,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g, grads):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _route(grads, t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis)


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g, grads):
        if a.requires_grad:
            _route(grads, a, _unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            _route(grads, b, _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _make(np.where(cond, a.data, b.data), (a, b), bw)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    """(…, m, k) @ (…, k, n) with broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )

    if b.ndim == 2 and a.ndim > 2:
        # activations times a weight matrix: fold the leading axes into rows
        k, n = b.shape
        a2 = a.data.reshape(-1, k)

        def bw(g, grads):
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                _route(grads, a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _route(grads, b, a2.T @ g2)

        return _make((a2 @ b.data).reshape(a.shape[:-1] + (n,)), (a, b), bw)

    def bw(g, grads):
        if a.requires_grad:
            _route(grads, a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _route(grads, b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


# -- normalisation and softmax family ---------------------------------------


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, grads):
        _route(grads, x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g, grads):
        p = np.exp(out)
        _route(grads, x, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must be ({d},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g, grads):
        if gain.requires_grad:
            _route(grads, gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _route(grads, bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            dx = inv * (
                gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )
            _route(grads, x, dx)

    return _make(out, (x, gain, bias), bw)


def l2_normalize(x, axis: int = -1) -> Tensor:
    """x / ‖x‖ along ``axis``; zero vectors are rejected."""
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise ValueError("cannot normalise a zero vector")
    out = x.data / norm

    def bw(g, grads):
        _route(grads, x, (g - out * (g * out).sum(axis=axis, keepdims=True)) / norm)

    return _make(out, (x,), bw)


def cross_entropy(logits, targets, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(``logits``).

    ``logits`` is (..., C); ``targets`` has the leading shape.  Optional
    ``weights`` (same shape as targets) turn the mean into a weighted mean,
    which is how padded positions get excluded.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    c = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"target id out of range for {c} classes")
    lp = log_softmax(logits, axis=-1)
    flat = reshape(lp, (-1, c))
    picked = getitem(flat, (np.arange(targets.size), targets.reshape(-1)))
    if weights is None:
        return tmean(neg(picked))
    w = np.asarray(weights, dtype=DTYPE).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy received no weighted positions")
    return tsum(neg(picked) * (w / total))

