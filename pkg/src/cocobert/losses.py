"""InfoNCE, inter-modal matching / intra-modal denoising losses, key memories, CMM."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import FULL_COCO
from .tensor import ShapeError, Tensor

UNIT_TOL = 1e-8


@dataclass
class CoCoConfig:
    tau: float = 0.2
    memory_size: int = 8192
    losses: tuple[str, ...] = field(default=FULL_COCO)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.memory_size < 1:
            raise ValueError("memory size must be >= 1")


class KeyMemory:
    """Fixed-capacity FIFO ring of unit-norm key vectors."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.buffer = np.zeros((capacity, dim))
        self.cursor = 0
        self.count = 0

    @classmethod
    def random(cls, capacity: int, dim: int, rng: np.random.Generator) -> KeyMemory:
        """A full memory of random unit vectors, so losses are defined from step 0."""
        mem = cls(capacity, dim)
        v = rng.normal(size=(capacity, dim))
        mem.buffer[...] = v / np.linalg.norm(v, axis=1, keepdims=True)
        mem.count = capacity
        return mem

    def __len__(self) -> int:
        return self.count

    def negatives(self) -> np.ndarray:
        """The filled slots, in storage order."""
        return self.buffer if self.count == self.capacity else self.buffer[: self.count]

    def contents(self) -> np.ndarray:
        """Filled slots ordered oldest to newest."""
        if self.count < self.capacity:
            return self.buffer[: self.count].copy()
        return np.roll(self.buffer, -self.cursor, axis=0)

    def push(self, keys) -> None:
        memory_push(self, keys)


def memory_push(mem: KeyMemory, keys) -> KeyMemory:
    """Enqueue unit-norm keys, overwriting the oldest once full."""
    keys = np.asarray(keys, dtype=np.float64).reshape(-1, mem.dim)
    if keys.shape[0] == 0:
        return mem
    norms = np.linalg.norm(keys, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"memory keys must be unit norm (got norms {norms.min():.6g}..{norms.max():.6g})")
    if keys.shape[0] > mem.capacity:
        keys = keys[-mem.capacity :]
    n = keys.shape[0]
    idx = (mem.cursor + np.arange(n)) % mem.capacity
    mem.buffer[idx] = keys
    mem.cursor = int((mem.cursor + n) % mem.capacity)
    mem.count = min(mem.capacity, mem.count + n)
    return mem


def cosine_sim(q, k) -> Tensor:
    q, k = T.as_tensor(q), T.as_tensor(k)
    if q.shape != k.shape:
        raise ShapeError(f"cosine_sim shapes differ: {q.shape} vs {k.shape}")
    return T.tsum(T.l2_normalize(q) * T.l2_normalize(k), axis=-1)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("cannot take the cosine of a zero vector")
    return x / n


def info_nce_batch(queries: Tensor, positives, negatives, tau: float) -> Tensor:
    """Batch-mean InfoNCE with cosine logits; only ``queries`` are differentiated.

    queries (B, D), positives (B, D), negatives (K, D) shared by every row.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    queries = T.as_tensor(queries)
    if queries.ndim != 2 or queries.shape[1] == 0:
        raise ShapeError(f"queries must be a non-empty (B, D) array, got {queries.shape}")
    b, d = queries.shape
    pos = np.asarray(positives.data if isinstance(positives, Tensor) else positives, dtype=np.float64)
    neg = np.asarray(negatives.data if isinstance(negatives, Tensor) else negatives, dtype=np.float64)
    neg = neg.reshape(-1, d) if neg.size else np.zeros((0, d))
    if pos.shape != (b, d):
        raise ShapeError(f"positive keys {pos.shape} do not match queries {queries.shape}")
    q = T.l2_normalize(queries)
    pos_logit = T.tsum(q * _unit_rows(pos), axis=1, keepdims=True)
    if neg.shape[0]:
        logits = T.concat([pos_logit, T.matmul(q, _unit_rows(neg).T.copy())], axis=1)
    else:
        logits = pos_logit
    logits = logits * (1.0 / tau)
    return T.tmean(T.neg(T.log_softmax(logits, axis=1)[:, 0]))


def info_nce(q, k_pos, negatives: Sequence, tau: float) -> Tensor:
    """-log softmax of the positive among [<q,k+>, <q,k_1->, ...] / tau for one query."""
    q = T.as_tensor(q)
    if q.data.size == 0:
        raise ValueError("empty query")
    d = q.shape[-1]
    neg = np.array([np.asarray(getattr(k, "data", k), dtype=np.float64) for k in negatives]).reshape(-1, d)
    pos = np.asarray(getattr(k_pos, "data", k_pos), dtype=np.float64).reshape(1, d)
    return info_nce_batch(q.reshape(1, d), pos, neg, tau)


def _check_dims(*arrays) -> None:
    dims = {a.shape[-1] for a in arrays}
    if len(dims) != 1:
        raise ShapeError(f"representation widths disagree: {sorted(dims)}")


def co_im_terms(video_q, sentence_q, video_k, sentence_k, mem_v: KeyMemory, mem_s: KeyMemory, tau: float):
    """(video->sentence, sentence->video) matching losses."""
    _check_dims(video_q, sentence_q, np.asarray(video_k), np.asarray(sentence_k), mem_v.buffer, mem_s.buffer)
    v2s = info_nce_batch(video_q, sentence_k, mem_s.negatives(), tau)
    s2v = info_nce_batch(sentence_q, video_k, mem_v.negatives(), tau)
    return v2s, s2v


def co_im_loss(video_q, sentence_q, video_k, sentence_k, mem_v, mem_s, tau: float) -> Tensor:
    v2s, s2v = co_im_terms(video_q, sentence_q, video_k, sentence_k, mem_v, mem_s, tau)
    return v2s + s2v


def co_id_terms(video_q, sentence_q, video_k, sentence_k, mem_v: KeyMemory, mem_s: KeyMemory, tau: float):
    """(video, sentence) denoising losses: each query against its own modality."""
    _check_dims(video_q, sentence_q, np.asarray(video_k), np.asarray(sentence_k), mem_v.buffer, mem_s.buffer)
    v = info_nce_batch(video_q, video_k, mem_v.negatives(), tau)
    s = info_nce_batch(sentence_q, sentence_k, mem_s.negatives(), tau)
    return v, s


def co_id_loss(video_q, sentence_q, video_k, sentence_k, mem_v, mem_s, tau: float) -> Tensor:
    v, s = co_id_terms(video_q, sentence_q, video_k, sentence_k, mem_v, mem_s, tau)
    return v + s


def cmm_binary_loss(scores, labels) -> Tensor:
    """Mean binary cross-entropy of matching logits; label 1 = matched, 0 = mismatched."""
    scores = T.as_tensor(scores)
    labels = np.asarray(labels, dtype=np.float64).reshape(scores.shape)
    if np.any((labels != 0.0) & (labels != 1.0)):
        raise ValueError("CMM labels must be 0 or 1")
    return T.tmean(T.softplus(scores * (1.0 - 2.0 * labels)))


def mismatch_permutation(batch_size: int) -> np.ndarray:
    """Cyclic shift pairing video i with sentence i+1."""
    return (np.arange(batch_size) + 1) % batch_size
