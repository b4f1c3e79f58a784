"""Experiment orchestration: synthetic splits, the loss ablation, the memory sweep."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import TABLE2_ROWS, ExperimentConfig
from .data import SyntheticSpec, VideoSentencePair, generate_synthetic, write_dataset
from .downstream import RetrievalConfig, finetune_retrieval, zero_shot_recall
from .training import Trainer, save_checkpoint

log = logging.getLogger(__name__)


def synthetic_spec(cfg: ExperimentConfig, seed: int, n_pairs: int | None = None) -> SyntheticSpec:
    d, m = cfg.data, cfg.model
    return SyntheticSpec(
        n_pairs=d.n_pairs + d.n_test if n_pairs is None else n_pairs,
        n_concepts=d.n_concepts, d_frame=m.d_frame, vocab_size=m.vocab_size,
        frames_min=d.frames_min, frames_max=d.frames_max,
        words_min=d.words_min, words_max=d.words_max,
        feature_noise=d.feature_noise, token_noise=d.token_noise,
        word_signal=d.word_signal, seed=seed,
    )


def synthetic_split(cfg: ExperimentConfig, seed: int) -> tuple[list[VideoSentencePair], list[VideoSentencePair]]:
    """One draw of ``n_pairs + n_test`` pairs; the tail is the held-out set."""
    pairs = generate_synthetic(synthetic_spec(cfg, seed))
    return pairs[: cfg.data.n_pairs], pairs[cfg.data.n_pairs :]


def with_train(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **changes))


def pretrain(cfg: ExperimentConfig, train: Sequence[VideoSentencePair], out_dir: Path | None = None,
             timing: bool = True) -> Trainer:
    trainer = Trainer(cfg, train, timing=timing)
    metrics = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = out_dir / "metrics.jsonl"
        metrics.write_text("")
        save_checkpoint(out_dir / "checkpoint.ccbt", trainer)
    trainer.train_epochs(metrics_path=metrics, checkpoint_dir=out_dir)
    return trainer


@dataclass
class RunResult:
    """Retrieval numbers for one (configuration, seed) pre-training run."""

    name: str
    seed: int
    losses: tuple[str, ...]
    memory_size: int
    zero_shot: dict[int, float]
    finetuned: dict[int, float] = field(default_factory=dict)
    pretrain_seconds: float = 0.0

    def to_json(self) -> dict:
        return {
            "name": self.name, "seed": self.seed, "losses": list(self.losses),
            "memory_size": self.memory_size,
            "zero_shot": {str(k): v for k, v in self.zero_shot.items()},
            "finetuned": {str(k): v for k, v in self.finetuned.items()},
            "pretrain_seconds": self.pretrain_seconds,
        }


def run_one(name: str, cfg: ExperimentConfig, train, test, out_dir: Path | None = None,
            finetune: RetrievalConfig | None = None, keep: dict | None = None) -> RunResult:
    t0 = time.perf_counter()
    trainer = pretrain(cfg, train, out_dir)
    seconds = time.perf_counter() - t0
    res = RunResult(name, cfg.train.seed, cfg.train.losses, cfg.train.memory_size,
                    zero_shot_recall(trainer.model, test), pretrain_seconds=seconds)
    if keep is not None:
        keep[(name, cfg.train.seed)] = trainer
    if finetune is not None:
        model = copy.deepcopy(trainer.model)
        finetune_retrieval(model, train, dataclasses.replace(finetune, seed=cfg.train.seed))
        res.finetuned = zero_shot_recall(model, test)
    log.info("%s seed %d: zero-shot R@1 %.3f finetuned R@1 %s (%.0fs)", name, cfg.train.seed,
             res.zero_shot[1], res.finetuned.get(1), seconds)
    if out_dir is not None:
        (out_dir / "report.json").write_text(json.dumps(res.to_json(), indent=2) + "\n")
    return res


def _mean(results: list[RunResult], which: str, k: int = 1) -> float:
    return float(np.mean([getattr(r, which)[k] for r in results]))


def table2(cfg: ExperimentConfig, seeds: Sequence[int], out_dir: Path | None = None,
           rows: dict[str, tuple[str, ...]] = TABLE2_ROWS, finetune: RetrievalConfig | None = None,
           keep: dict | None = None) -> dict:
    """Pre-train every ablation row for every seed; fine-tune retrieval; tabulate."""
    finetune = finetune or RetrievalConfig()
    per_row: dict[str, list[RunResult]] = {name: [] for name in rows}
    for seed in seeds:
        train, test = synthetic_split(cfg, seed)
        for name, losses in rows.items():
            run_cfg = with_train(cfg, losses=losses, seed=seed)
            sub = out_dir / name / f"seed{seed}" if out_dir is not None else None
            per_row[name].append(run_one(name, run_cfg, train, test, sub, finetune, keep))
    report = {
        "metric": "R@1", "seeds": list(seeds), "epochs": cfg.train.epochs,
        "finetune": dataclasses.asdict(finetune),
        "rows": [
            {
                "name": name, "losses": list(rows[name]),
                "finetuned_r1": _mean(res, "finetuned"), "zero_shot_r1": _mean(res, "zero_shot"),
                "runs": [r.to_json() for r in res],
            }
            for name, res in per_row.items()
        ],
    }
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "table2.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def memory_sweep(cfg: ExperimentConfig, sizes: Sequence[int], seeds: Sequence[int],
                 out_dir: Path | None = None, reuse: dict | None = None) -> dict:
    """Re-pretrain with each memory size. ``reuse`` maps (K, seed) to a finished RunResult."""
    rows = []
    for k in sizes:
        results = []
        for seed in seeds:
            if reuse and (k, seed) in reuse:
                results.append(reuse[(k, seed)])
                continue
            train, test = synthetic_split(cfg, seed)
            run_cfg = with_train(cfg, memory_size=k, seed=seed)
            sub = out_dir / f"K{k}" / f"seed{seed}" if out_dir is not None else None
            results.append(run_one(f"K={k}", run_cfg, train, test, sub))
        rows.append({
            "memory_size": k, "zero_shot_r1": _mean(results, "zero_shot"),
            "zero_shot_r5": _mean(results, "zero_shot", 5),
            "per_seed_r1": [r.zero_shot[1] for r in results],
        })
    report = {"metric": "zero-shot R@1", "seeds": list(seeds), "losses": list(cfg.train.losses), "rows": rows}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "sweep_memory.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def format_table(rows: list[dict], columns: Sequence[str]) -> str:
    head = "  ".join(f"{c:>16}" for c in columns)
    lines = [head]
    for r in rows:
        cells = []
        for c in columns:
            v = r[c]
            cells.append(f"{v:>16.3f}" if isinstance(v, float) else f"{str(v):>16}")
        lines.append("  ".join(cells))
    return "\n".join(lines)


def export_split(cfg: ExperimentConfig, seed: int, out_dir: Path) -> tuple[Path, Path]:
    train, test = synthetic_split(cfg, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    a, b = out_dir / "train.jsonl", out_dir / "test.jsonl"
    write_dataset(a, train)
    write_dataset(b, test)
    return a, b
