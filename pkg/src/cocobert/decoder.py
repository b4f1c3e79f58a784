"""Cross-modal decoder over [video; sentence] states, MLM/MSG heads, greedy decoding."""

from __future__ import annotations

import enum

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import CLS_ID, SEP_ID, AttentionPooler, LayerNorm, Linear, Module, TransformerBlock, valid_mask
from .tensor import ShapeError, Tensor


class DecodeMode(enum.Enum):
    BIDIRECTIONAL = "bidirectional"
    CAUSAL_SENTENCE = "causal-sentence"


class CrossModalDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.blocks = [TransformerBlock(cfg.d_model, cfg.n_heads, rng) for _ in range(cfg.decoder_blocks)]
        self.ln_f = LayerNorm(cfg.d_model)
        self.vocab = Linear(cfg.d_model, cfg.vocab_size, rng)
        self.pooler = AttentionPooler(cfg.d_model, rng)


def decoder_mask(video_valid: np.ndarray, sentence_valid: np.ndarray, mode: DecodeMode) -> np.ndarray:
    """(B, Nv+Ns, Nv+Ns) allowed matrix.

    Every row sees the valid video keys.  In causal mode video rows see no
    sentence keys and sentence row j sees sentence keys <= j, so sentence
    information only flows forward through any depth.
    """
    b, nv = video_valid.shape
    ns = sentence_valid.shape[1]
    valid = np.concatenate([video_valid, sentence_valid], axis=1)
    allowed = np.repeat(valid[:, None, :], nv + ns, axis=1)
    if mode is DecodeMode.CAUSAL_SENTENCE:
        allowed[:, :nv, nv:] = False
        allowed[:, nv:, nv:] &= np.tril(np.ones((ns, ns), dtype=bool))[None]
    return allowed


def cross_modal_decode(
    dec: CrossModalDecoder,
    video_states: Tensor,
    video_valid: np.ndarray,
    sentence_states: Tensor,
    sentence_valid: np.ndarray,
    mode: DecodeMode = DecodeMode.BIDIRECTIONAL,
) -> Tensor:
    """Fuse (B, Nv, D) and (B, Ns, D) into (B, Nv+Ns, D); split at ``Nv``."""
    if video_states.shape[-1] != sentence_states.shape[-1]:
        raise ShapeError(f"width mismatch: video {video_states.shape} vs sentence {sentence_states.shape}")
    x = T.concat([video_states, sentence_states], axis=1)
    allowed = decoder_mask(video_valid, sentence_valid, mode)
    for blk in dec.blocks:
        x = blk(x, allowed)
    return dec.ln_f(x)


def _nonzero(mask: np.ndarray) -> tuple[np.ndarray, ...]:
    return tuple(np.nonzero(mask))


def mlm_loss(dec: CrossModalDecoder, fused_sentence: Tensor, word_mask: np.ndarray, tokens: np.ndarray) -> Tensor:
    """Cross-entropy at masked word positions, averaged over all of them."""
    word_mask = np.asarray(word_mask, dtype=bool)
    if not word_mask.any():
        raise ValueError("mlm_loss needs at least one masked position")
    idx = _nonzero(word_mask)
    logits = dec.vocab(fused_sentence[idx])
    return T.cross_entropy(logits, np.asarray(tokens)[idx])


def msg_inputs(tokens: np.ndarray, token_lengths: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing view of framed sentences: inputs, targets, valid mask.

    Input j is token j and predicts token j+1, for j < len-1; the final
    target is [SEP].
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    lengths = np.asarray(token_lengths)
    if np.any(lengths < 3):
        raise ValueError("msg_loss needs at least one body token per sentence")
    inputs = tokens[:, :-1]
    targets = tokens[:, 1:]
    valid = valid_mask(lengths - 1, inputs.shape[1])
    return inputs, targets, valid


def msg_logits(model, video_states: Tensor, video_valid: np.ndarray, inputs: np.ndarray, input_lengths) -> Tensor:
    """Vocabulary logits for every sentence position under the causal decode."""
    states, _ = model.sentence.query(inputs, input_lengths, causal=True)
    sv = valid_mask(input_lengths, inputs.shape[1])
    fused = cross_modal_decode(model.decoder, video_states, video_valid, states, sv, DecodeMode.CAUSAL_SENTENCE)
    nv = video_states.shape[1]
    return model.decoder.vocab(fused[:, nv:])


def msg_loss(model, video_states: Tensor, video_valid: np.ndarray, tokens, token_lengths) -> Tensor:
    """Teacher-forced next-token cross-entropy, averaged over every predicted position."""
    inputs, targets, valid = msg_inputs(tokens, token_lengths)
    logits = msg_logits(model, video_states, video_valid, inputs, np.asarray(token_lengths) - 1)
    return T.cross_entropy(logits, targets, weights=valid)


def msg_token_stats(model, video_states, video_valid, tokens, token_lengths) -> tuple[float, int, int]:
    """(summed cross-entropy, correct argmax count, token count) without a tape."""
    with T.no_grad():
        inputs, targets, valid = msg_inputs(tokens, token_lengths)
        logits = msg_logits(model, video_states, video_valid, inputs, np.asarray(token_lengths) - 1).data
    lp = logits - logits.max(axis=-1, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    hits = logits.argmax(axis=-1) == targets
    return float(nll[valid].sum()), int(hits[valid].sum()), int(valid.sum())


def greedy_decode(model, frames, max_len: int) -> list[int]:
    """Argmax decoding from [CLS] until [SEP] or ``max_len`` generated tokens.

    The returned list includes the terminating [SEP] when one is produced.
    Ties go to the lowest token id.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    max_len = min(max_len, model.cfg.max_words + 1)
    out: list[int] = []
    with T.no_grad():
        vstates, _ = model.video.query(frames, [frames.shape[1]])
        vvalid = np.ones((1, frames.shape[1]), dtype=bool)
        ids = [CLS_ID]
        for _ in range(max_len):
            arr = np.array([ids], dtype=np.int64)
            logits = msg_logits(model, vstates, vvalid, arr, [len(ids)]).data[0, -1]
            nxt = int(np.argmax(logits))
            out.append(nxt)
            if nxt == SEP_ID:
                break
            ids.append(nxt)
    return out
