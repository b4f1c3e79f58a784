"""Run configuration: dataclasses plus the flat ``key = value`` file format.

Precedence is built-in default < config file < ``--set`` overrides.  All
dataclass fields share one flat namespace, so a key like ``d_model`` or
``tau`` is unambiguous.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

ALL_LOSSES = ("co_im", "co_id", "mlm", "msg", "cmm")
FULL_COCO = ("co_im", "co_id", "mlm", "msg")


@dataclass
class ModelConfig:
    d_frame: int = 32
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 64
    max_frames: int = 12
    max_words: int = 10
    video_blocks: int = 1
    sentence_blocks: int = 1
    decoder_blocks: int = 1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for name in ("d_frame", "d_model", "vocab_size", "max_frames", "max_words"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainConfig:
    losses: tuple[str, ...] = FULL_COCO
    tau: float = 0.2
    memory_size: int = 1024
    momentum: float = 0.99
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mask_prob: float = 0.15

    def __post_init__(self):
        self.losses = tuple(self.losses)
        unknown = set(self.losses) - set(ALL_LOSSES)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}; choose from {ALL_LOSSES}")
        if not self.losses:
            raise ValueError("at least one loss term must be enabled")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.memory_size < 1:
            raise ValueError("memory_size must be >= 1")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr and batch_size must be positive, epochs non-negative")

    @property
    def contrastive(self) -> bool:
        return "co_im" in self.losses or "co_id" in self.losses


@dataclass
class DataConfig:
    n_pairs: int = 2000
    n_test: int = 200
    n_concepts: int = 8
    frames_min: int = 4
    frames_max: int = 12
    words_min: int = 3
    words_max: int = 10
    feature_noise: float = 0.3
    token_noise: float = 0.1
    word_signal: float = 1.0


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_flat(self) -> dict[str, Any]:
        out = {}
        for part in (self.model, self.train, self.data):
            out.update(dataclasses.asdict(part))
        return out


# full-size template and the shrunken desk presets
PRESETS: dict[str, dict[str, Any]] = {
    "full-scale": {
        "video_blocks": 6, "sentence_blocks": 6, "decoder_blocks": 6,
        "memory_size": 8192, "tau": 0.2, "batch_size": 512, "lr": 3e-5, "epochs": 30,
        "d_model": 768, "n_heads": 12,
    },
    "desk": {},
    # the ablation runner; rows override ``losses``
    "table2": {"epochs": 4},
    "desk-tiny": {
        "d_model": 16, "n_heads": 2, "d_frame": 8, "vocab_size": 24, "memory_size": 64,
        "n_pairs": 64, "n_test": 16, "epochs": 1, "batch_size": 16,
        "frames_max": 6, "words_max": 5, "frames_min": 2, "words_min": 2, "n_concepts": 4,
    },
}

# ablation rows mirroring the pre-training proxy-task study
TABLE2_ROWS: dict[str, tuple[str, ...]] = {
    "base": ("mlm", "msg"),
    "base+cmm": ("mlm", "msg", "cmm"),
    "base+co_im": ("mlm", "msg", "co_im"),
    "base+co_id": ("mlm", "msg", "co_id"),
    "base+co_im+co_id": ("mlm", "msg", "co_im", "co_id"),
}


def _field_index() -> dict[str, tuple[str, dataclasses.Field]]:
    idx = {}
    for part, cls in (("model", ModelConfig), ("train", TrainConfig), ("data", DataConfig)):
        for f in fields(cls):
            idx[f.name] = (part, f)
    return idx


def parse_value(raw: str) -> Any:
    """Coerce a config string to bool / int / float / comma list / str."""
    s = raw.strip()
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "\"'":
        return s[1:-1]
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in s:
        return tuple(parse_value(p) for p in s.split(",") if p.strip())
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def read_config_file(path: str | Path) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = parse_value(val)
    return out


def _coerce(f: dataclasses.Field, value: Any) -> Any:
    if f.name == "losses":
        if isinstance(value, str):
            value = (value,)
        return tuple(str(v) for v in value)
    if f.type in ("int", int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ValueError(f"{f.name} expects an integer, got {value!r}")
        return int(value)
    if f.type in ("float", float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{f.name} expects a number, got {value!r}")
        return float(value)
    return value


def build_config(
    preset: str | None = None,
    file_values: dict[str, Any] | None = None,
    overrides: dict[str, Any] | None = None,
) -> ExperimentConfig:
    """Layer preset, file values and overrides (later wins) over the defaults."""
    idx = _field_index()
    merged: dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        merged.update(PRESETS[preset])
    for layer in (file_values or {}, overrides or {}):
        for key, value in layer.items():
            if key not in idx:
                raise KeyError(f"unknown config key {key!r}")
            merged[key] = value
    parts: dict[str, dict[str, Any]] = {"model": {}, "train": {}, "data": {}}
    for key, value in merged.items():
        part, f = idx[key]
        parts[part][key] = _coerce(f, value)
    model = ModelConfig(**parts["model"])
    data = DataConfig(**parts["data"])
    # the model must cover the longest configured sequences
    if "max_frames" not in parts["model"]:
        model.max_frames = max(model.max_frames, data.frames_max)
    if "max_words" not in parts["model"]:
        model.max_words = max(model.max_words, data.words_max)
    return ExperimentConfig(model=model, train=TrainConfig(**parts["train"]), data=data)


def parse_overrides(items: list[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out
