"""Downstream tasks on synthetic analogs: retrieval, QA classification, captioning."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import VideoSentencePair, collate
from .decoder import DecodeMode, cross_modal_decode, msg_token_stats
from .model import CoCoBert
from .nn import Linear, Module
from .tensor import Tensor
from .training import AdamState, adam_update


def _chunks(items: Sequence, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


# -- retrieval --------------------------------------------------------------


def pooled_embeddings(model: CoCoBert, pairs: Sequence[VideoSentencePair], chunk: int = 128):
    """Unit-norm pooled query-encoder outputs on unmasked inputs: (videos, sentences)."""
    vids, sents = [], []
    with T.no_grad():
        for part in _chunks(pairs, chunk):
            b = collate(part, mask=False)
            _, v = model.video.query(b.frames, b.frame_lengths)
            _, s = model.sentence.query(b.tokens, b.token_lengths)
            vids.append(T.l2_normalize(v).data)
            sents.append(T.l2_normalize(s).data)
    return np.concatenate(vids), np.concatenate(sents)


def score_pair(model: CoCoBert, video: VideoSentencePair, sentence: VideoSentencePair) -> float:
    """Cosine between the pooled video of ``video`` and pooled sentence of ``sentence``."""
    v, _ = pooled_embeddings(model, [video])
    _, s = pooled_embeddings(model, [sentence])
    return float(v[0] @ s[0])


def retrieval_scores(model: CoCoBert, pairs: Sequence[VideoSentencePair]) -> np.ndarray:
    """(n sentences x n videos) cosine matrix; the true video of sentence i is i."""
    v, s = pooled_embeddings(model, pairs)
    return s @ v.T


def recall_at_k(scores, truth, k: int) -> float:
    """Fraction of rows whose true column ranks in the top ``k``.

    Ranking is by descending score; ties go to the lower candidate index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    nq, nc = scores.shape
    if k < 1 or k > nc:
        raise ValueError(f"k={k} must lie in [1, {nc}]")
    if truth.shape != (nq,):
        raise ValueError("need exactly one true candidate per query")
    if nq == 0:
        return 0.0
    t = scores[np.arange(nq), truth][:, None]
    idx = np.arange(nc)[None, :]
    ahead = (scores > t) | ((scores == t) & (idx < truth[:, None]))
    return float(np.mean(ahead.sum(axis=1) < k))


def zero_shot_recall(model: CoCoBert, pairs: Sequence[VideoSentencePair], ks=(1, 5, 10)) -> dict[int, float]:
    scores = retrieval_scores(model, pairs)
    truth = np.arange(len(pairs))
    return {k: recall_at_k(scores, truth, k) for k in ks if k <= len(pairs)}


@dataclass
class RetrievalConfig:
    margin: float = 0.2
    negatives: int = 0  # 0 = every other pair in the batch
    epochs: int = 2
    lr: float = 5e-4
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("triplet margin must be positive")


def triplet_ranking_loss(scores: Tensor, margin: float, negatives: int = 0) -> Tensor:
    """Bidirectional hinge over a (B x B) video-sentence score matrix.

    Diagonal entries are positives.  Each anchor sums
    max(0, margin - s(pos) + s(neg)) over its in-batch negatives (all of
    them when ``negatives`` is 0, else the first ``negatives`` in cyclic
    order); losses are averaged over anchors and summed over directions.
    """
    s = T.as_tensor(scores)
    b = s.shape[0]
    if b < 2:
        raise ValueError("triplet loss needs a batch of at least two pairs")
    keep = ~np.eye(b, dtype=bool)
    if negatives:
        keep = np.zeros((b, b), dtype=bool)
        for shift in range(1, min(negatives, b - 1) + 1):
            keep[np.arange(b), (np.arange(b) + shift) % b] = True
    pos = T.getitem(s, (np.arange(b), np.arange(b)))
    # video-anchored rows: s[v, s'] ; sentence-anchored: columns
    v_anchor = T.relu(margin - pos.reshape(b, 1) + s) * keep
    s_anchor = T.relu(margin - pos.reshape(1, b) + s) * keep.T
    return (T.tsum(v_anchor) + T.tsum(s_anchor)) * (1.0 / b)


def finetune_retrieval(model: CoCoBert, pairs: Sequence[VideoSentencePair], cfg: RetrievalConfig) -> list[float]:
    """Triplet fine-tuning of the two query encoders with in-batch negatives."""
    if cfg.batch_size < 2 or len(pairs) < 2:
        raise ValueError("retrieval fine-tuning needs batches of at least two pairs")
    params = {}
    for prefix, mod in (("v", model.video.query), ("s", model.sentence.query)):
        params.update({f"{prefix}.{k}": p for k, p in mod.named_parameters()})
    state = AdamState.for_params(params)
    losses = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 500, epoch]).permutation(len(pairs))
        for part in _chunks([pairs[i] for i in order], cfg.batch_size):
            if len(part) < 2:
                continue
            b = collate(part, mask=False)
            _, v = model.video.query(b.frames, b.frame_lengths)
            _, s = model.sentence.query(b.tokens, b.token_lengths)
            scores = T.matmul(T.l2_normalize(v), T.l2_normalize(s).T)
            loss = triplet_ranking_loss(scores, cfg.margin, cfg.negatives)
            for p in params.values():
                p.grad = None
            T.backward(loss)
            adam_update(params, state, cfg.lr)
            losses.append(loss.item())
    return losses


# -- question answering -----------------------------------------------------


class QAHead(Module):
    """A single linear map from [pooled video ; pooled question] (2D) to answer logits."""

    def __init__(self, d_model: int, n_answers: int, rng: np.random.Generator):
        self.linear = Linear(2 * d_model, n_answers, rng)
        self.n_answers = n_answers


def qa_features(model: CoCoBert, batch) -> Tensor:
    """Decoder-fused states pooled separately per segment and concatenated."""
    vs, _ = model.video.query(batch.frames, batch.frame_lengths)
    ss, _ = model.sentence.query(batch.tokens, batch.token_lengths)
    vvalid, svalid = model.valid_masks(batch)
    fused = cross_modal_decode(model.decoder, vs, vvalid, ss, svalid, DecodeMode.BIDIRECTIONAL)
    nv = batch.frames.shape[1]
    pv = model.decoder.pooler(fused[:, :nv], vvalid)
    ps = model.decoder.pooler(fused[:, nv:], svalid)
    return T.concat([pv, ps], axis=1)


def qa_logits(model: CoCoBert, head: QAHead, batch) -> Tensor:
    return head.linear(qa_features(model, batch))


@dataclass
class QAConfig:
    n_answers: int = 8
    epochs: int = 3
    lr: float = 2e-4
    batch_size: int = 32
    seed: int = 0
    train_backbone: bool = True


def _check_labels(pairs: Sequence[VideoSentencePair], n_answers: int) -> None:
    for i, x in enumerate(pairs):
        if x.label is None or not 0 <= x.label < n_answers:
            raise ValueError(f"pair {i}: label {x.label} outside [0, {n_answers})")


def qa_accuracy(model: CoCoBert, head: QAHead, pairs: Sequence[VideoSentencePair]) -> float:
    _check_labels(pairs, head.n_answers)
    if not pairs:
        return 0.0
    hits = 0
    with T.no_grad():
        for part in _chunks(pairs, 128):
            b = collate(part, mask=False)
            pred = qa_logits(model, head, b).data.argmax(axis=1)
            hits += int((pred == b.labels).sum())
    return hits / len(pairs)


def finetune_qa(model: CoCoBert, train: Sequence[VideoSentencePair], test: Sequence[VideoSentencePair],
                cfg: QAConfig) -> tuple[QAHead, float]:
    """Train the answer head (and optionally the backbone) with cross-entropy."""
    _check_labels(train, cfg.n_answers)
    _check_labels(test, cfg.n_answers)
    head = QAHead(model.cfg.d_model, cfg.n_answers, np.random.default_rng([cfg.seed, 600]))
    params = {f"head.{k}": p for k, p in head.named_parameters()}
    if cfg.train_backbone:
        for prefix, mod in (("v", model.video.query), ("s", model.sentence.query), ("d", model.decoder)):
            params.update({f"{prefix}.{k}": p for k, p in mod.named_parameters()})
    state = AdamState.for_params(params)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 700, epoch]).permutation(len(train))
        for part in _chunks([train[i] for i in order], cfg.batch_size):
            b = collate(part, mask=False)
            loss = T.cross_entropy(qa_logits(model, head, b), b.labels)
            for p in params.values():
                p.grad = None
            T.backward(loss)
            adam_update(params, state, cfg.lr)
    model.zero_grad()
    return head, qa_accuracy(model, head, test)


# -- captioning -------------------------------------------------------------


def caption_eval(model: CoCoBert, pairs: Sequence[VideoSentencePair], chunk: int = 128) -> dict[str, float]:
    """Teacher-forced next-token accuracy and perplexity over unmasked pairs."""
    nll, hits, count = 0.0, 0, 0
    for part in _chunks(pairs, chunk):
        b = collate(part, mask=False)
        with T.no_grad():
            vs, _ = model.video.query(b.frames, b.frame_lengths)
        vvalid, _ = model.valid_masks(b)
        s, h, c = msg_token_stats(model, vs, vvalid, b.tokens, b.token_lengths)
        nll, hits, count = nll + s, hits + h, count + c
    if count == 0:
        return {"token_accuracy": 0.0, "perplexity": float("nan"), "n_tokens": 0}
    return {"token_accuracy": hits / count, "perplexity": math.exp(nll / count), "n_tokens": count}
