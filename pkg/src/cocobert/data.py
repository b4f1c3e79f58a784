"""Masking, synthetic planted-correlation data, and JSON-Lines dataset files."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .nn import CLS_ID, MASK_ID, N_SPECIAL, PAD_ID, SEP_ID, SPECIAL_IDS


class DatasetError(ValueError):
    pass


@dataclass
class VideoSentencePair:
    frames: np.ndarray  # (N_f, D_f)
    tokens: np.ndarray  # body ids, unframed
    label: int | None = None
    id: str | None = None

    def __eq__(self, other):
        if not isinstance(other, VideoSentencePair):
            return NotImplemented
        return (
            np.array_equal(self.frames, other.frames)
            and np.array_equal(self.tokens, other.tokens)
            and self.label == other.label
            and self.id == other.id
        )


def frame_tokens(body: Sequence[int]) -> np.ndarray:
    return np.concatenate([[CLS_ID], np.asarray(body, dtype=np.int64), [SEP_ID]]).astype(np.int64)


# -- masking ----------------------------------------------------------------


def _select(candidates: np.ndarray, p: float, rng: np.random.Generator, force: bool) -> np.ndarray:
    hit = rng.random(candidates.size) < p
    if force and candidates.size and not hit.any():
        hit[rng.integers(candidates.size)] = True
    return candidates[hit]


def mask_tokens(
    tokens, p: float = 0.15, rng: np.random.Generator | None = None, force: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Replace each non-special token by [MASK] with probability ``p``.

    If nothing was picked and ``force`` is set, one body position is masked
    uniformly at random.  Returns ``(masked_ids, positions)``.
    """
    rng = rng if rng is not None else np.random.default_rng()
    tokens = np.asarray(tokens, dtype=np.int64)
    body = np.flatnonzero(~np.isin(tokens, SPECIAL_IDS))
    pos = _select(body, p, rng, force)
    out = tokens.copy()
    out[pos] = MASK_ID
    return out, pos


def mask_frames(
    n_frames: int, p: float = 0.15, rng: np.random.Generator | None = None, force: bool = True
) -> np.ndarray:
    """Positions of frames to swap for the learned mask vector."""
    rng = rng if rng is not None else np.random.default_rng()
    return _select(np.arange(n_frames), p, rng, force)


@dataclass
class MaskedBatch:
    """Padded, masked view of a list of pairs plus the original unmasked view."""

    frames: np.ndarray  # (B, Nf, D_f), zero padded
    frame_lengths: np.ndarray  # (B,)
    frame_mask: np.ndarray  # (B, Nf) bool
    tokens: np.ndarray  # (B, L) framed originals, PAD padded
    masked_tokens: np.ndarray  # (B, L)
    token_lengths: np.ndarray  # (B,) framed lengths
    word_mask: np.ndarray  # (B, L) bool
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.frames.shape[0]


def collate(
    pairs: Sequence[VideoSentencePair],
    rng: np.random.Generator | None = None,
    p: float = 0.15,
    mask: bool = True,
) -> MaskedBatch:
    """Pad a list of pairs into a batch, masking frames then words per pair."""
    if not pairs:
        raise DatasetError("cannot collate an empty batch")
    b = len(pairs)
    nf = max(x.frames.shape[0] for x in pairs)
    df = pairs[0].frames.shape[1]
    framed = [frame_tokens(x.tokens) for x in pairs]
    length = max(t.size for t in framed)
    frames = np.zeros((b, nf, df))
    fmask = np.zeros((b, nf), dtype=bool)
    toks = np.full((b, length), PAD_ID, dtype=np.int64)
    mtoks = toks.copy()
    wmask = np.zeros((b, length), dtype=bool)
    flen = np.empty(b, dtype=np.int64)
    tlen = np.empty(b, dtype=np.int64)
    for i, (pair, ft) in enumerate(zip(pairs, framed)):
        n = pair.frames.shape[0]
        frames[i, :n] = pair.frames
        flen[i], tlen[i] = n, ft.size
        toks[i, : ft.size] = ft
        if mask:
            fmask[i, mask_frames(n, p, rng)] = True
            m, pos = mask_tokens(ft, p, rng)
            mtoks[i, : ft.size] = m
            wmask[i, pos] = True
        else:
            mtoks[i, : ft.size] = ft
    labels = None
    if all(x.label is not None for x in pairs):
        labels = np.array([x.label for x in pairs], dtype=np.int64)
    return MaskedBatch(frames, flen, fmask, toks, mtoks, tlen, wmask, labels)


# -- synthetic data ---------------------------------------------------------


@dataclass
class SyntheticSpec:
    n_pairs: int = 2000
    n_concepts: int = 8
    d_frame: int = 32
    vocab_size: int = 64
    frames_min: int = 4
    frames_max: int = 12
    words_min: int = 3
    words_max: int = 10
    feature_noise: float = 0.3
    token_noise: float = 0.1
    word_signal: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        body = self.vocab_size - N_SPECIAL
        if self.n_pairs < 0:
            raise DatasetError("n_pairs must be non-negative")
        if self.n_concepts < 1 or self.n_concepts > body:
            raise DatasetError(f"n_concepts must be in [1, {body}] for vocab_size {self.vocab_size}")
        if not 1 <= self.frames_min <= self.frames_max:
            raise DatasetError("need 1 <= frames_min <= frames_max")
        if not 1 <= self.words_min <= self.words_max:
            raise DatasetError("need 1 <= words_min <= words_max")
        if self.feature_noise < 0 or not 0.0 <= self.token_noise <= 1.0 or self.word_signal < 0:
            raise DatasetError("noise levels must be non-negative (token_noise <= 1)")
        if self.d_frame < 1:
            raise DatasetError("d_frame must be positive")

    def partitions(self) -> list[np.ndarray]:
        """Contiguous blocks of body token ids, one per concept."""
        body = np.arange(N_SPECIAL, self.vocab_size)
        return np.array_split(body, self.n_concepts)


@dataclass
class SyntheticWorld:
    prototypes: np.ndarray  # (C, D_f)
    word_vectors: np.ndarray  # (vocab, D_f), zero for specials
    partitions: list[np.ndarray]

    def clean_frame(self, concept: int, tokens: np.ndarray, word_signal: float) -> np.ndarray:
        return self.prototypes[concept] + word_signal * self.word_vectors[tokens].mean(axis=0)


def synthetic_world(spec: SyntheticSpec) -> SyntheticWorld:
    rng = np.random.default_rng([spec.seed, 0])
    protos = rng.normal(size=(spec.n_concepts, spec.d_frame))
    words = rng.normal(size=(spec.vocab_size, spec.d_frame))
    words[:N_SPECIAL] = 0.0
    return SyntheticWorld(protos, words, spec.partitions())


def generate_synthetic(spec: SyntheticSpec) -> list[VideoSentencePair]:
    """Pairs whose frames and words share a latent concept and word content.

    Each frame row is ``prototype[c] + word_signal * mean(word_vector[tokens])``
    plus Gaussian noise, so the video carries both the concept and a trace of
    the exact words of its sentence.  With ``word_signal = 0`` every pair of a
    concept shares the same clean frame.
    """
    spec.validate()
    world = synthetic_world(spec)
    rng = np.random.default_rng([spec.seed, 1])
    out = []
    for i in range(spec.n_pairs):
        c = int(rng.integers(spec.n_concepts))
        n_s = int(rng.integers(spec.words_min, spec.words_max + 1))
        n_f = int(rng.integers(spec.frames_min, spec.frames_max + 1))
        part = world.partitions[c]
        toks = part[rng.integers(part.size, size=n_s)]
        noisy = rng.random(n_s) < spec.token_noise
        toks[noisy] = rng.integers(N_SPECIAL, spec.vocab_size, size=int(noisy.sum()))
        clean = world.clean_frame(c, toks, spec.word_signal)
        frames = clean[None, :] + spec.feature_noise * rng.normal(size=(n_f, spec.d_frame))
        out.append(VideoSentencePair(frames, toks.astype(np.int64), label=c, id=f"syn-{spec.seed}-{i}"))
    return out


def nearest_prototype_accuracy(pairs: Sequence[VideoSentencePair], world: SyntheticWorld) -> float:
    """Concept accuracy of assigning each video's mean frame to the closest prototype."""
    if not pairs:
        return 1.0
    hits = 0
    for x in pairs:
        d = ((world.prototypes - x.frames.mean(axis=0)) ** 2).sum(axis=1)
        hits += int(np.argmin(d) == x.label)
    return hits / len(pairs)


# -- JSON Lines I/O ---------------------------------------------------------


def pair_to_record(pair: VideoSentencePair) -> dict:
    rec: dict = {"frames": pair.frames.tolist(), "tokens": [int(t) for t in pair.tokens]}
    if pair.label is not None:
        rec["label"] = int(pair.label)
    if pair.id is not None:
        rec["id"] = pair.id
    return rec


def write_dataset(path: str | Path, pairs: Iterable[VideoSentencePair]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair_to_record(pair), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def read_dataset(
    path: str | Path, vocab_size: int | None = None, d_frame: int | None = None,
    max_frames: int | None = None, max_words: int | None = None,
) -> list[VideoSentencePair]:
    """Parse and validate a JSON-Lines dataset; errors name the offending line."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetError(f"{where}: record must be an object")
            unknown = rec.keys() - {"frames", "tokens", "label", "id"}
            if unknown:
                raise DatasetError(f"{where}: unknown fields {sorted(unknown)}")
            frames, tokens = rec.get("frames"), rec.get("tokens")
            if not isinstance(frames, list) or not frames or not all(isinstance(r, list) for r in frames):
                raise DatasetError(f"{where}: 'frames' must be a non-empty array of arrays")
            width = len(frames[0])
            if width == 0 or any(len(r) != width for r in frames):
                raise DatasetError(f"{where}: frame rows must share one non-zero width")
            if not all(_is_num(v) for r in frames for v in r):
                raise DatasetError(f"{where}: frame values must be numbers")
            if d_frame is None:
                d_frame = width
            elif width != d_frame:
                raise DatasetError(f"{where}: frame width {width} != {d_frame}")
            if max_frames is not None and len(frames) > max_frames:
                raise DatasetError(f"{where}: {len(frames)} frames exceed max {max_frames}")
            if not isinstance(tokens, list) or not tokens or not all(_is_int(t) for t in tokens):
                raise DatasetError(f"{where}: 'tokens' must be a non-empty array of integers")
            if max_words is not None and len(tokens) > max_words:
                raise DatasetError(f"{where}: {len(tokens)} tokens exceed max {max_words}")
            for t in tokens:
                if t < N_SPECIAL:
                    raise DatasetError(f"{where}: token id {t} is negative or reserved for specials")
                if vocab_size is not None and t >= vocab_size:
                    raise DatasetError(f"{where}: token id {t} >= vocab_size {vocab_size}")
            label = rec.get("label")
            if label is not None and not _is_int(label):
                raise DatasetError(f"{where}: 'label' must be an integer")
            rid = rec.get("id")
            if rid is not None and not isinstance(rid, str):
                raise DatasetError(f"{where}: 'id' must be a string")
            arr = np.array(frames, dtype=np.float64)
            if not np.isfinite(arr).all():
                raise DatasetError(f"{where}: frame values must be finite")
            pairs.append(VideoSentencePair(arr, np.array(tokens, dtype=np.int64), label, rid))
    return pairs
