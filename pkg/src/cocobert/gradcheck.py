"""Central-difference gradient checking against the reverse-mode engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def _rel_err(ad: np.ndarray, fd: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(ad - fd) / denom)) if ad.size else 0.0


def _scalar(out) -> float:
    if not isinstance(out, Tensor) or out.data.size != 1:
        shape = getattr(out, "shape", None)
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {shape}")
    return float(out.data.reshape(()))


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    The error per component is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    _scalar(out)
    backward(out)
    g_ad = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    g_fd = np.zeros_like(base)
    flat = g_fd.reshape(-1)
    with no_grad():
        for i in range(base.size):
            xp = base.copy().reshape(-1)
            xp[i] += h
            xm = base.copy().reshape(-1)
            xm[i] -= h
            fp = _scalar(f(Tensor(xp.reshape(base.shape))))
            fm = _scalar(f(Tensor(xm.reshape(base.shape))))
            flat[i] = (fp - fm) / (2.0 * h)
    return _rel_err(g_ad, g_fd)


def grad_check_params(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5, max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Like :func:`grad_check` but perturbs parameter tensors in place.

    ``max_entries`` caps how many coordinates per parameter are probed
    (sampled with ``rng``); the autodiff gradient is always computed in full.
    """
    for p in params:
        p.grad = None
    out = loss_fn()
    _scalar(out)
    backward(out)
    worst = 0.0
    for p in params:
        g_ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        fd = np.empty(idx.size)
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = _scalar(loss_fn())
                flat[i] = orig - h
                fm = _scalar(loss_fn())
                flat[i] = orig
                fd[j] = (fp - fm) / (2.0 * h)
        worst = max(worst, _rel_err(g_ad.reshape(-1)[idx], fd))
    for p in params:
        p.grad = None
    return worst
