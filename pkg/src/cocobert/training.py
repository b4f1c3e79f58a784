"""Pre-training: Adam, the per-step objective, metrics stream, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .config import ALL_LOSSES, ExperimentConfig, TrainConfig, build_config
from .data import VideoSentencePair, collate
from .model import CoCoBert, compute_losses

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, T.Tensor]) -> AdamState:
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_update(
    params: dict[str, T.Tensor], state: AdamState, lr: float,
    beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam; a missing gradient counts as zero."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else 0.0
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"{name}: Adam moment shape {m.shape} != parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def rng_state_array(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise TypeError("only PCG64 generators can be checkpointed")
    words = []
    for key in ("state", "inc"):
        x = st["state"][key]
        words += [x & (2**64 - 1), x >> 64]
    words += [st["has_uint32"], st["uinteger"]]
    return np.array(words, dtype=np.uint64)


def restore_rng(words: np.ndarray) -> np.random.Generator:
    w = [int(x) for x in words]
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": w[0] | (w[1] << 64), "inc": w[2] | (w[3] << 64)},
        "has_uint32": w[4],
        "uinteger": w[5],
    }
    return rng


class Trainer:
    """Owns the model, optimizer, masking RNG and step counter for one run."""

    def __init__(self, cfg: ExperimentConfig, dataset: Sequence[VideoSentencePair], timing: bool = True):
        self.cfg = cfg
        tc = cfg.train
        self.dataset = list(dataset)
        self.model = CoCoBert(cfg.model, seed=tc.seed, memory_size=tc.memory_size, momentum=tc.momentum)
        self.params = self.model.trainable()
        self.adam = AdamState.for_params(self.params)
        self.rng = np.random.default_rng([tc.seed, 300])
        self.step = 0
        self.timing = timing

    @property
    def tc(self) -> TrainConfig:
        return self.cfg.train

    # -- batching ---------------------------------------------------------
    def steps_per_epoch(self) -> int:
        n, bs = len(self.dataset), self.tc.batch_size
        full, rest = divmod(n, bs)
        # a trailing single pair cannot form a mismatched CMM example
        return full + (1 if rest >= 2 else 0)

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.tc.seed, 400, epoch]).permutation(len(self.dataset))

    def batch_pairs(self, step: int) -> list[VideoSentencePair]:
        spe = self.steps_per_epoch()
        epoch, i = divmod(step, spe)
        order = self.epoch_order(epoch)
        bs = self.tc.batch_size
        return [self.dataset[j] for j in order[i * bs : (i + 1) * bs]]

    # -- one optimisation step -------------------------------------------
    def pretrain_step(self, batch) -> dict[str, float]:
        tc = self.tc
        model = self.model
        out = compute_losses(model, batch, tc.losses, tc.tau)
        total = out.total
        for name, val in out.terms.items():
            if not math.isfinite(val.item()):
                raise NonFiniteLoss(f"loss term {name} became {val.item()} at step {self.step}")
        model.zero_grad()
        T.backward(total)
        self.audit_key_gradients()
        adam_update(self.params, self.adam, tc.lr, tc.beta1, tc.beta2, tc.adam_eps)
        if tc.contrastive:
            model.momentum_update()
            model.mem_v.push(out.encoded.video_key)
            model.mem_s.push(out.encoded.sentence_key)
        result = {k: v.item() for k, v in out.terms.items()}
        result["total"] = total.item()
        return result

    def audit_key_gradients(self) -> None:
        for name, p in self.model.key_parameters().items():
            if p.requires_grad or (p.grad is not None and np.any(p.grad)):
                raise AssertionError(f"key parameter {name} received a gradient")

    def train_steps(
        self, n_steps: int, metrics_fh=None, callback: Callable[[dict], None] | None = None
    ) -> list[dict]:
        rows = []
        spe = self.steps_per_epoch()
        for _ in range(n_steps):
            t0 = time.perf_counter()
            batch = collate(self.batch_pairs(self.step), self.rng, self.tc.mask_prob)
            losses = self.pretrain_step(batch)
            row = {"step": self.step, "epoch": self.step // spe, "loss_total": losses["total"]}
            for term in ALL_LOSSES:
                row[f"loss_{term}"] = losses.get(term)
            row["lr"] = self.tc.lr
            row["seconds"] = time.perf_counter() - t0 if self.timing else None
            self.step += 1
            rows.append(row)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(row) + "\n")
            if callback is not None:
                callback(row)
        return rows

    def train_epochs(self, epochs: int | None = None, metrics_path: str | Path | None = None,
                     checkpoint_dir: str | Path | None = None) -> list[dict]:
        epochs = self.tc.epochs if epochs is None else epochs
        spe = self.steps_per_epoch()
        rows: list[dict] = []
        fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
        try:
            for _ in range(epochs):
                epoch_rows = self.train_steps(spe, fh)
                rows += epoch_rows
                mean = float(np.mean([r["loss_total"] for r in epoch_rows])) if epoch_rows else float("nan")
                log.info("epoch %d  mean loss %.4f", self.step // max(spe, 1), mean)
                if checkpoint_dir is not None:
                    save_checkpoint(Path(checkpoint_dir) / "checkpoint.ccbt", self)
        finally:
            if fh:
                fh.close()
        return rows

    # -- persistence ------------------------------------------------------
    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, p in self.model.all_parameters().items():
            out[f"param/{name}"] = p.data
        out["meta/config"] = np.frombuffer(
            json.dumps(self.cfg.to_flat(), sort_keys=True).encode("utf-8"), dtype=np.uint8
        )
        out["meta/step"] = np.array([self.step], dtype=np.uint64)
        out["rng/mask"] = rng_state_array(self.rng)
        for tag, mem in (("video", self.model.mem_v), ("sentence", self.model.mem_s)):
            out[f"memory/{tag}/buffer"] = mem.buffer
            out[f"memory/{tag}/cursor"] = np.array([mem.cursor, mem.count], dtype=np.uint64)
        out["adam/step"] = np.array([self.adam.step], dtype=np.uint64)
        for name in self.params:
            out[f"adam/m/{name}"] = self.adam.m[name]
            out[f"adam/v/{name}"] = self.adam.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        expected = self.state_tensors()
        unknown = tensors.keys() - expected.keys()
        if unknown:
            raise ckpt.CheckpointError(f"unknown tensor names in checkpoint: {sorted(unknown)[:5]}")
        missing = expected.keys() - tensors.keys()
        if missing:
            raise ckpt.CheckpointError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")
        for name, arr in tensors.items():
            if name.startswith("meta/config") or name.startswith("rng/") or name.endswith("/cursor"):
                continue
            if arr.shape != expected[name].shape:
                raise ckpt.CheckpointError(f"{name}: shape {arr.shape} != expected {expected[name].shape}")
        params = self.model.all_parameters()
        for name, p in params.items():
            p.data[...] = tensors[f"param/{name}"]
        self.step = int(tensors["meta/step"][0])
        self.rng = restore_rng(tensors["rng/mask"])
        for tag, mem in (("video", self.model.mem_v), ("sentence", self.model.mem_s)):
            mem.buffer[...] = tensors[f"memory/{tag}/buffer"]
            mem.cursor, mem.count = (int(x) for x in tensors[f"memory/{tag}/cursor"])
        self.adam.step = int(tensors["adam/step"][0])
        for name in self.params:
            self.adam.m[name][...] = tensors[f"adam/m/{name}"]
            self.adam.v[name][...] = tensors[f"adam/v/{name}"]
        self.model.video.check_congruent()
        self.model.sentence.check_congruent()


def config_from_tensors(tensors: dict[str, np.ndarray]) -> ExperimentConfig:
    flat = json.loads(bytes(tensors["meta/config"]).decode("utf-8"))
    return build_config(overrides=flat)


def save_checkpoint(path: str | Path, trainer: Trainer) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.write_tensors(path, trainer.state_tensors())


def load_checkpoint(path: str | Path, dataset: Sequence[VideoSentencePair] = (), timing: bool = True) -> Trainer:
    """Rebuild a trainer (model, optimizer, memories, RNG) from a checkpoint file."""
    tensors = ckpt.read_tensors(path)
    if "meta/config" not in tensors:
        raise ckpt.CheckpointError("checkpoint has no config echo")
    trainer = Trainer(config_from_tensors(tensors), dataset, timing=timing)
    trainer.load_state_tensors(tensors)
    return trainer
