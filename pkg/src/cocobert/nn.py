"""Parameter containers and transformer building blocks.

Everything operates on batched activations of shape ``(B, L, D)``; single
sequences are handled by passing ``B = 1``.  Attention masks are boolean
"allowed" arrays broadcastable to ``(B, Lq, Lk)``.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

PAD_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3
N_SPECIAL = 4
SPECIAL_IDS = (PAD_ID, CLS_ID, SEP_ID, MASK_ID)


class Module:
    """Minimal parameter tree: Tensor attributes are parameters, Module
    attributes and lists of Modules are children."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: expected {p.shape}, got {state[k].shape}")
            p.data[...] = state[k]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def param(arr) -> Tensor:
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def _normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return param(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.w = _normal(rng, (d_in, d_out), 1.0 / np.sqrt(d_in))
        if bias:
            self.b = param(np.zeros(d_out))
        else:
            self.b = None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        return y if self.b is None else y + self.b


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = param(np.ones(d))
        self.bias = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


# -- masks ------------------------------------------------------------------


def valid_mask(lengths, max_len: int) -> np.ndarray:
    """(B, max_len) boolean array, True at real (non-pad) positions."""
    lengths = np.asarray(lengths)
    return np.arange(max_len)[None, :] < lengths[:, None]


def key_mask(valid: np.ndarray) -> np.ndarray:
    """Allowed-matrix letting every query attend to every non-pad key."""
    return valid[:, None, :]


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def _attn_bias(allowed: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), shape)
    if not allowed.any(axis=-1).all():
        raise ValueError("attention mask leaves a query row with no allowed key")
    return np.where(allowed, 0.0, -np.inf)


# -- attention --------------------------------------------------------------


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected (L, D) or (B, L, D) activations, got {x.shape}")
    return x, False


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ValueError(f"width {d_model} not divisible by {n_heads} heads")
        s = 1.0 / np.sqrt(d_model)
        self.wq = _normal(rng, (d_model, d_model), s)
        self.wk = _normal(rng, (d_model, d_model), s)
        self.wv = _normal(rng, (d_model, d_model), s)
        self.wo = _normal(rng, (d_model, d_model), s)
        self.bo = param(np.zeros(d_model))
        self.n_heads = n_heads

    def __call__(self, queries: Tensor, keys_values: Tensor, allowed) -> Tensor:
        return multi_head_attention(queries, keys_values, allowed, self)


def multi_head_attention(queries: Tensor, keys_values: Tensor, allowed, p: MultiHeadAttention) -> Tensor:
    """Scaled dot-product attention with per-head projections.

    Disallowed logits become -inf before the softmax, so they get exactly
    zero weight.  A query row with no allowed key is an error.
    """
    q_in, squeeze = _as_batch(queries)
    kv_in, _ = _as_batch(keys_values)
    b, lq, d = q_in.shape
    lk = kv_in.shape[1]
    if kv_in.shape[2] != d or kv_in.shape[0] != b:
        raise ShapeError(f"query {q_in.shape} and key/value {kv_in.shape} shapes disagree")
    h = p.n_heads
    dh = d // h
    bias = _attn_bias(allowed, (b, lq, lk))[:, None, :, :]

    def heads(x: Tensor, n: int) -> Tensor:
        return x.reshape(b, n, h, dh).transpose(0, 2, 1, 3)

    q = heads(q_in @ p.wq, lq)
    k = heads(kv_in @ p.wk, lk)
    v = heads(kv_in @ p.wv, lk)
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)) + bias
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, lq, d)
    out = ctx @ p.wo + p.bo
    return out.reshape(lq, d) if squeeze else out


class TransformerBlock(Module):
    """Pre-norm block: x + MHA(LN(x)), then + FFN(LN(.)) with a 4x hidden layer."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.ff1 = Linear(d_model, 4 * d_model, rng)
        self.ff2 = Linear(4 * d_model, d_model, rng)

    def __call__(self, x: Tensor, allowed) -> Tensor:
        return transformer_block(x, allowed, self)

    def zero_output_projections(self) -> None:
        for t in (self.attn.wo, self.attn.bo, self.ff2.w, self.ff2.b):
            t.data[...] = 0.0


def transformer_block(x: Tensor, allowed, p: TransformerBlock) -> Tensor:
    h = p.ln1(x)
    x = x + p.attn(h, h, allowed)
    return x + p.ff2(T.gelu(p.ff1(p.ln2(x))))


class AttentionPooler(Module):
    """Two-layer scorer (D -> D/2 -> 1) whose softmax weights average the tokens."""

    def __init__(self, d_model: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or max(1, d_model // 2)
        self.fc = Linear(d_model, hidden, rng)
        # no output bias: softmax would make its gradient identically zero
        self.score = _normal(rng, (hidden, 1), 1.0 / np.sqrt(hidden))

    def weights(self, seq: Tensor, valid: np.ndarray) -> Tensor:
        b, length, _ = seq.shape
        valid = np.asarray(valid, dtype=bool).reshape(b, length)
        if not valid.any(axis=1).all():
            raise ValueError("attention_pool needs at least one non-pad position")
        s = (T.gelu(self.fc(seq)) @ self.score).reshape(b, length)
        return T.softmax(s + np.where(valid, 0.0, -np.inf), axis=-1)

    def __call__(self, seq: Tensor, valid=None) -> Tensor:
        return attention_pool(seq, valid, self)


def attention_pool(seq: Tensor, valid, p: AttentionPooler) -> Tensor:
    """(B, L, D) -> (B, D); also accepts a single (L, D) sequence -> (D,)."""
    x, squeeze = _as_batch(seq)
    b, length, d = x.shape
    if valid is None:
        valid = np.ones((b, length), dtype=bool)
    w = p.weights(x, valid)
    out = T.matmul(w.reshape(b, 1, length), x).reshape(b, d)
    return out.reshape(d) if squeeze else out


# -- embeddings -------------------------------------------------------------


class SentenceEmbedding(Module):
    def __init__(self, vocab_size: int, d_model: int, max_len: int, rng: np.random.Generator):
        if vocab_size <= max(SPECIAL_IDS):
            raise ValueError(f"vocab_size {vocab_size} leaves no room for special tokens")
        self.tokens = _normal(rng, (vocab_size, d_model), 0.3)
        self.positions = _normal(rng, (max_len, d_model), 0.1)
        self.vocab_size = vocab_size
        self.max_len = max_len

    def __call__(self, ids) -> Tensor:
        return embed_sentence(ids, self)


def embed_sentence(ids, p: SentenceEmbedding) -> Tensor:
    """Token + positional embedding of framed ids, (L,) -> (L, D) or (B, L) -> (B, L, D)."""
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    ids2 = ids[None, :] if single else ids
    length = ids2.shape[1]
    if length > p.max_len:
        raise ShapeError(f"sentence length {length} exceeds max_len {p.max_len}")
    if ids2.size and (ids2.min() < 0 or ids2.max() >= p.vocab_size):
        raise ValueError(f"token id out of range for vocab_size {p.vocab_size}")
    out = T.take_rows(p.tokens, ids2) + p.positions[:length]
    return out.reshape(length, -1) if single else out


class VideoEmbedding(Module):
    def __init__(self, d_frame: int, d_model: int, max_len: int, rng: np.random.Generator):
        self.proj = Linear(d_frame, d_model, rng)
        self.mask_vector = _normal(rng, (d_frame,), 1.0)
        self.positions = _normal(rng, (max_len, d_model), 0.1)
        self.d_frame = d_frame
        self.max_len = max_len

    def __call__(self, frames, frame_mask=None) -> Tensor:
        return embed_video(frames, frame_mask, self)


def embed_video(frames, frame_mask, p: VideoEmbedding) -> Tensor:
    """Project frame features to width D, swapping masked rows for the learned mask vector.

    ``frame_mask`` is either a boolean array shaped like the frame axes or
    (for a single sequence) an iterable of masked positions.
    """
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    single = x.ndim == 2
    if single:
        x = x.reshape((1,) + x.shape)
    b, n, df = x.shape
    if df != p.d_frame:
        raise ShapeError(f"frame width {df} != configured {p.d_frame}")
    if n > p.max_len:
        raise ShapeError(f"{n} frames exceed max_len {p.max_len}")
    mask = np.zeros((b, n), dtype=bool)
    if frame_mask is not None:
        fm = np.asarray(frame_mask)
        if fm.dtype == bool:
            mask = fm.reshape(b, n)
        else:
            pos = np.asarray(list(frame_mask), dtype=np.int64)
            if pos.size and (pos.min() < 0 or pos.max() >= n):
                raise IndexError(f"frame mask position out of range [0, {n})")
            mask[0, pos] = True
    if mask.any():
        mv = p.mask_vector.reshape(1, 1, df)
        x = T.where(mask[:, :, None], mv, x)
    out = p.proj(x) + p.positions[:n]
    return out.reshape(n, -1) if single else out
