"""Video/sentence query encoders and their momentum (EMA) key twins."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import (
    AttentionPooler,
    LayerNorm,
    Module,
    SentenceEmbedding,
    TransformerBlock,
    VideoEmbedding,
    causal_mask,
    key_mask,
    valid_mask,
)
from .tensor import Tensor


class _Stack(Module):
    def __init__(self, cfg: ModelConfig, n_blocks: int, rng: np.random.Generator):
        self.blocks = [TransformerBlock(cfg.d_model, cfg.n_heads, rng) for _ in range(n_blocks)]
        self.ln_f = LayerNorm(cfg.d_model)
        self.pooler = AttentionPooler(cfg.d_model, rng)

    def run(self, x: Tensor, allowed, valid) -> tuple[Tensor, Tensor]:
        for blk in self.blocks:
            x = blk(x, allowed)
        x = self.ln_f(x)
        return x, self.pooler(x, valid)


class VideoEncoder(_Stack):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.embed = VideoEmbedding(cfg.d_frame, cfg.d_model, cfg.max_frames, rng)
        super().__init__(cfg, cfg.video_blocks, rng)

    def __call__(self, frames, lengths, frame_mask=None) -> tuple[Tensor, Tensor]:
        """(B, N, D_f) frames -> token states (B, N, D) and pooled (B, D)."""
        frames = np.asarray(frames, dtype=np.float64)
        valid = valid_mask(lengths, frames.shape[1])
        x = self.embed(frames, frame_mask)
        return self.run(x, key_mask(valid), valid)


class SentenceEncoder(_Stack):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.embed = SentenceEmbedding(cfg.vocab_size, cfg.d_model, cfg.max_words + 2, rng)
        super().__init__(cfg, cfg.sentence_blocks, rng)

    def __call__(self, ids, lengths, causal: bool = False) -> tuple[Tensor, Tensor]:
        """(B, L) framed ids -> token states (B, L, D) and pooled (B, D)."""
        ids = np.asarray(ids, dtype=np.int64)
        valid = valid_mask(lengths, ids.shape[1])
        allowed = key_mask(valid)
        if causal:
            allowed = allowed & causal_mask(ids.shape[1])[None]
        return self.run(self.embed(ids), allowed, valid)


def encode_video_query(enc: VideoEncoder, frames, lengths, frame_mask) -> tuple[Tensor, Tensor]:
    return enc(frames, lengths, frame_mask)


def encode_sentence_query(enc: SentenceEncoder, masked_ids, lengths) -> tuple[Tensor, Tensor]:
    return enc(masked_ids, lengths)


@dataclass
class EncodedPairOutputs:
    video_states: Tensor
    sentence_states: Tensor
    video_query: Tensor
    sentence_query: Tensor
    video_key: np.ndarray | None = None
    sentence_key: np.ndarray | None = None


class EncoderPair:
    """A gradient-trained query encoder and its EMA-updated key copy."""

    def __init__(self, query: Module, momentum: float = 0.99):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
        self.query = query
        self.key = copy.deepcopy(query)
        for p in self.key.parameters():
            p.requires_grad = False
            p.grad = None
        self.momentum = momentum

    def encode_key(self, *inputs) -> np.ndarray:
        """Pooled, L2-normalised key for unmasked inputs; never taped."""
        with T.no_grad():
            _, pooled = self.key(*inputs)
            return T.l2_normalize(pooled).data

    def momentum_update(self, m: float | None = None) -> None:
        momentum_update(self, self.momentum if m is None else m)

    def check_congruent(self) -> None:
        q = dict(self.query.named_parameters())
        k = dict(self.key.named_parameters())
        if q.keys() != k.keys():
            raise ValueError("query/key parameter names differ")
        for name in q:
            if q[name].shape != k[name].shape:
                raise ValueError(f"{name}: query {q[name].shape} vs key {k[name].shape}")


def momentum_update(pair: EncoderPair, m: float) -> None:
    """theta_k <- m * theta_k + (1 - m) * theta_q for every parameter."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    for (name, q), (_, k) in zip(pair.query.named_parameters(), pair.key.named_parameters()):
        if q.shape != k.shape:
            raise ValueError(f"{name}: shape mismatch {q.shape} vs {k.shape}")
        if m == 1.0:
            continue
        if m == 0.0:
            k.data[...] = q.data
        else:
            k.data *= m
            k.data += (1.0 - m) * q.data
