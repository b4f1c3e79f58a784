"""Seeded gradient checks over every differentiable component.

Each component is a factory ``(rng) -> (f, x)`` where ``f`` maps a Tensor
to a scalar Tensor and ``x`` is the starting point.  Losses are contracted
against random weights so no gradient entry is structurally zero.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .decoder import DecodeMode, cross_modal_decode, mlm_loss, msg_loss
from .gradcheck import grad_check, grad_check_params
from .losses import KeyMemory, cmm_binary_loss, co_id_loss, co_im_loss, info_nce_batch
from .model import CoCoBert
from .nn import AttentionPooler, MultiHeadAttention, TransformerBlock, causal_mask

TOLERANCE = 1e-5
STEP = 1e-5

Factory = Callable[[np.random.Generator], tuple[Callable, np.ndarray]]


def _contract(rng, shape):
    w = rng.normal(size=shape)
    return lambda y: T.tsum(y * w)


def _matmul(rng):
    b = rng.normal(size=(5, 3))
    c = _contract(rng, (4, 3))
    return (lambda x: c(T.matmul(x, b))), rng.normal(size=(4, 5))


def _elementwise(op):
    def factory(rng):
        c = _contract(rng, (3, 4))
        return (lambda x: c(op(x))), rng.normal(size=(3, 4))

    return factory


def _layer_norm(rng):
    g, b = rng.normal(size=6), rng.normal(size=6)
    c = _contract(rng, (4, 6))
    return (lambda x: c(T.layer_norm(x, g, b))), rng.normal(size=(4, 6))


def _softmax_ce(rng):
    targets = rng.integers(0, 5, size=4)
    return (lambda x: T.cross_entropy(x, targets)), rng.normal(size=(4, 5))


def _unit(rng, shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _info_nce(rng):
    d = 6
    pos, neg = _unit(rng, (3, d)), _unit(rng, (5, d))
    tau = float(rng.choice([0.07, 0.2, 1.0]))
    return (lambda x: info_nce_batch(x, pos, neg, tau)), rng.normal(size=(3, d))


def _memories(rng, d, k=5):
    mv, ms = KeyMemory(k, d), KeyMemory(k, d)
    mv.push(_unit(rng, (k, d)))
    ms.push(_unit(rng, (k, d)))
    return mv, ms


def _co_loss(fn):
    def factory(rng):
        d, b = 6, 3
        vk, sk = _unit(rng, (b, d)), _unit(rng, (b, d))
        mv, ms = _memories(rng, d)
        return (lambda x: fn(x[0], x[1], vk, sk, mv, ms, 0.2)), rng.normal(size=(2, b, d))

    return factory


def _cmm(rng):
    labels = rng.integers(0, 2, size=6)
    return (lambda x: cmm_binary_loss(x, labels)), rng.normal(size=6)


def _mha(rng):
    p = MultiHeadAttention(8, 2, rng)
    allowed = causal_mask(4)
    c = _contract(rng, (4, 8))
    return (lambda x: c(p(x, x, allowed))), rng.normal(size=(4, 8))


def _block(rng):
    p = TransformerBlock(8, 2, rng)
    allowed = np.ones((4, 4), dtype=bool)
    c = _contract(rng, (4, 8))
    return (lambda x: c(p(x, allowed))), rng.normal(size=(4, 8))


def _pool(rng):
    p = AttentionPooler(8, rng)
    valid = np.array([[True, True, True, True, False]])
    c = _contract(rng, (1, 8))
    return (lambda x: c(p(x, valid))), rng.normal(size=(1, 5, 8))


_TINY = ModelConfig(d_frame=5, d_model=8, n_heads=2, vocab_size=12, max_frames=4, max_words=4)


def _tiny_model(rng) -> CoCoBert:
    return CoCoBert(_TINY, seed=int(rng.integers(2**31)), memory_size=4)


def _mlm(rng):
    m = _tiny_model(rng)
    tokens = np.array([[1, 5, 6, 7, 2], [1, 8, 9, 2, 0]])
    word_mask = np.array([[0, 1, 0, 1, 0], [0, 0, 1, 0, 0]], dtype=bool)
    vvalid = np.array([[1, 1, 1], [1, 1, 0]], dtype=bool)
    svalid = tokens != 0

    def f(x):
        fused = cross_modal_decode(m.decoder, x[:, :3], vvalid, x[:, 3:], svalid, DecodeMode.BIDIRECTIONAL)
        return mlm_loss(m.decoder, fused[:, 3:], word_mask, tokens)

    return f, rng.normal(size=(2, 8, 8))


def _msg(rng):
    m = _tiny_model(rng)
    tokens = np.array([[1, 5, 6, 7, 2], [1, 8, 2, 0, 0]])
    lengths = np.array([5, 3])
    vvalid = np.array([[1, 1, 1], [1, 0, 0]], dtype=bool)
    return (lambda x: msg_loss(m, x, vvalid, tokens, lengths)), rng.normal(size=(2, 3, 8))


def _block_params(rng):
    """Block weights rather than inputs: checked through grad_check_params."""
    p = TransformerBlock(8, 2, rng)
    x = T.Tensor(rng.normal(size=(4, 8)))
    allowed = np.ones((4, 4), dtype=bool)
    c = _contract(rng, (4, 8))
    return (lambda: c(p(x, allowed))), p.parameters()


COMPONENTS: dict[str, Factory] = {
    "matmul": _matmul,
    "softmax": _elementwise(lambda x: T.softmax(x, axis=-1)),
    "log_softmax": _elementwise(lambda x: T.log_softmax(x, axis=0)),
    "gelu": _elementwise(T.gelu),
    "tanh": _elementwise(T.tanh),
    "exp": _elementwise(T.exp),
    "softplus": _elementwise(T.softplus),
    "l2_normalize": _elementwise(T.l2_normalize),
    "layer_norm": _layer_norm,
    "cross_entropy": _softmax_ce,
    "info_nce": _info_nce,
    "co_im_loss": _co_loss(co_im_loss),
    "co_id_loss": _co_loss(co_id_loss),
    "cmm_binary_loss": _cmm,
    "multi_head_attention": _mha,
    "transformer_block": _block,
    "attention_pool": _pool,
    "mlm_loss": _mlm,
    "msg_loss": _msg,
}
PARAM_COMPONENTS = {"transformer_block_params": _block_params}


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    seeds: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def run_suite(n_seeds: int = 20, base_seed: int = 0, names=None) -> list[GradReport]:
    reports = []
    for name, factory in COMPONENTS.items():
        if names and name not in names:
            continue
        worst = 0.0
        for s in range(n_seeds):
            f, x = factory(np.random.default_rng([base_seed, s, len(name)]))
            worst = max(worst, grad_check(f, x, STEP))
        reports.append(GradReport(name, worst, n_seeds))
    for name, factory in PARAM_COMPONENTS.items():
        if names and name not in names:
            continue
        worst = 0.0
        for s in range(n_seeds):
            rng = np.random.default_rng([base_seed, s, len(name)])
            loss_fn, params = factory(rng)
            worst = max(worst, grad_check_params(loss_fn, params, STEP, max_entries=6, rng=rng))
        reports.append(GradReport(name, worst, n_seeds))
    return reports


def format_reports(reports: list[GradReport], seconds: float | None = None) -> str:
    lines = [f"{'component':<26} {'max rel err':>12}  status"]
    for r in reports:
        lines.append(f"{r.name:<26} {r.max_rel_error:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    if seconds is not None:
        lines.append(f"({len(reports)} components, {reports[0].seeds if reports else 0} seeds, {seconds:.1f}s)")
    return "\n".join(lines)


def main_suite(n_seeds: int = 20) -> tuple[list[GradReport], float]:
    t0 = time.perf_counter()
    reps = run_suite(n_seeds)
    return reps, time.perf_counter() - t0
