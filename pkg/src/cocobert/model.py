"""The full pre-training model and its per-step loss computation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import MaskedBatch
from .decoder import CrossModalDecoder, DecodeMode, cross_modal_decode, mlm_loss, msg_loss
from .encoders import EncodedPairOutputs, EncoderPair, SentenceEncoder, VideoEncoder
from .losses import (
    KeyMemory,
    cmm_binary_loss,
    co_id_terms,
    co_im_terms,
    mismatch_permutation,
)
from .nn import Linear, Module, valid_mask
from .tensor import Tensor


class CoCoBert:
    """Query/key encoder pairs for both modalities, decoder, CMM head, memories."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, memory_size: int = 1024, momentum: float = 0.99):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 100])
        self.video = EncoderPair(VideoEncoder(cfg, rng), momentum)
        self.sentence = EncoderPair(SentenceEncoder(cfg, rng), momentum)
        self.decoder = CrossModalDecoder(cfg, rng)
        self.cmm_head = Linear(cfg.d_model, 1, rng)
        mrng = np.random.default_rng([seed, 200])
        self.mem_v = KeyMemory.random(memory_size, cfg.d_model, mrng)
        self.mem_s = KeyMemory.random(memory_size, cfg.d_model, mrng)

    # -- parameter bookkeeping -------------------------------------------
    def trainable(self) -> dict[str, Tensor]:
        """Named gradient-trained parameters (query sides, decoder, heads)."""
        out: dict[str, Tensor] = {}
        for prefix, mod in self._trainable_modules():
            for name, p in mod.named_parameters():
                out[f"{prefix}.{name}"] = p
        return out

    def _trainable_modules(self) -> list[tuple[str, Module]]:
        return [
            ("video_query", self.video.query),
            ("sentence_query", self.sentence.query),
            ("decoder", self.decoder),
            ("cmm_head", self.cmm_head),
        ]

    def key_parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, pair in (("video_key", self.video), ("sentence_key", self.sentence)):
            for name, p in pair.key.named_parameters():
                out[f"{prefix}.{name}"] = p
        return out

    def all_parameters(self) -> dict[str, Tensor]:
        return {**self.trainable(), **self.key_parameters()}

    def zero_grad(self) -> None:
        for p in self.trainable().values():
            p.grad = None

    def momentum_update(self) -> None:
        self.video.momentum_update()
        self.sentence.momentum_update()

    def set_momentum(self, m: float) -> None:
        self.video.momentum = m
        self.sentence.momentum = m

    # -- forward pieces ---------------------------------------------------
    def encode(self, batch: MaskedBatch, keys: bool) -> EncodedPairOutputs:
        vs, vq = self.video.query(batch.frames, batch.frame_lengths, batch.frame_mask)
        ss, sq = self.sentence.query(batch.masked_tokens, batch.token_lengths)
        out = EncodedPairOutputs(vs, ss, vq, sq)
        if keys:
            out.video_key = self.video.encode_key(batch.frames, batch.frame_lengths, None)
            out.sentence_key = self.sentence.encode_key(batch.tokens, batch.token_lengths)
        return out

    def valid_masks(self, batch: MaskedBatch) -> tuple[np.ndarray, np.ndarray]:
        return (
            valid_mask(batch.frame_lengths, batch.frames.shape[1]),
            valid_mask(batch.token_lengths, batch.tokens.shape[1]),
        )

    def fused_score(self, fused: Tensor, valid: np.ndarray) -> Tensor:
        return self.cmm_head(self.decoder.pooler(fused, valid)).reshape(-1)


@dataclass
class StepLosses:
    terms: dict[str, Tensor] = field(default_factory=dict)
    encoded: EncodedPairOutputs | None = None

    @property
    def total(self) -> Tensor:
        vals = list(self.terms.values())
        out = vals[0]
        for v in vals[1:]:
            out = out + v
        return out


def compute_losses(model: CoCoBert, batch: MaskedBatch, losses, tau: float) -> StepLosses:
    """Every enabled objective term for one masked batch, on one tape."""
    losses = set(losses)
    contrastive = bool(losses & {"co_im", "co_id"})
    enc = model.encode(batch, keys=contrastive)
    out = StepLosses(encoded=enc)
    vvalid, svalid = model.valid_masks(batch)
    if "co_im" in losses:
        v2s, s2v = co_im_terms(enc.video_query, enc.sentence_query, enc.video_key, enc.sentence_key,
                               model.mem_v, model.mem_s, tau)
        out.terms["co_im"] = v2s + s2v
    if "co_id" in losses:
        v, s = co_id_terms(enc.video_query, enc.sentence_query, enc.video_key, enc.sentence_key,
                           model.mem_v, model.mem_s, tau)
        out.terms["co_id"] = v + s
    fused = None
    if "mlm" in losses or "cmm" in losses:
        fused = cross_modal_decode(model.decoder, enc.video_states, vvalid, enc.sentence_states, svalid,
                                   DecodeMode.BIDIRECTIONAL)
    if "mlm" in losses:
        nv = batch.frames.shape[1]
        out.terms["mlm"] = mlm_loss(model.decoder, fused[:, nv:], batch.word_mask, batch.tokens)
    if "msg" in losses:
        out.terms["msg"] = msg_loss(model, enc.video_states, vvalid, batch.tokens, batch.token_lengths)
    if "cmm" in losses:
        b = len(batch)
        if b < 2:
            raise ValueError("CMM needs a batch of at least two pairs for mismatched sentences")
        perm = mismatch_permutation(b)
        shuffled = cross_modal_decode(model.decoder, enc.video_states, vvalid, enc.sentence_states[perm],
                                      svalid[perm], DecodeMode.BIDIRECTIONAL)
        allv = np.concatenate([vvalid, svalid], axis=1)
        allv_shuf = np.concatenate([vvalid, svalid[perm]], axis=1)
        scores = T.concat([model.fused_score(fused, allv), model.fused_score(shuffled, allv_shuf)], axis=0)
        labels = np.concatenate([np.ones(b), np.zeros(b)])
        out.terms["cmm"] = cmm_binary_loss(scores, labels)
    return out
