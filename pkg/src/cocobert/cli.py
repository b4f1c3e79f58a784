"""``cocobert`` command line: gen-data, pretrain, finetune, eval, gradcheck.

Exit codes: 0 success, 1 gradient check failure, 2 usage or validation
error, 3 non-finite loss abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import PRESETS, TABLE2_ROWS, ExperimentConfig, build_config, parse_overrides, read_config_file
from .data import DatasetError, SyntheticSpec, generate_synthetic, read_dataset, write_dataset
from .downstream import (QAConfig, QAHead, RetrievalConfig, caption_eval, finetune_qa, finetune_retrieval,
                         qa_accuracy, zero_shot_recall)
from .experiments import format_table, memory_sweep, pretrain, table2
from .gradsuite import format_reports, run_suite
from .training import NonFiniteLoss, Trainer, load_checkpoint, save_checkpoint

log = logging.getLogger("cocobert")

TASKS = ("retrieval", "qa", "caption")


class UsageError(Exception):
    pass


# -- shared plumbing --------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override (repeatable)")
    p.add_argument("--out", default="runs/latest", help="output directory")
    p.add_argument("--seed", type=int, help="run seed (overrides config)")
    p.add_argument("--preset", help=f"one of {', '.join(sorted(PRESETS))}")


def _config(args, extra: dict | None = None) -> ExperimentConfig:
    file_values = read_config_file(args.config) if args.config else None
    overrides = parse_overrides(args.set)
    overrides.update(extra or {})
    if args.seed is not None:
        overrides["seed"] = args.seed
    preset = args.preset if args.preset in PRESETS else None
    try:
        return build_config(preset, file_values, overrides)
    except KeyError as e:
        raise UsageError(e.args[0]) from None


def _load_pairs(path: str | None, cfg: ExperimentConfig, what: str):
    if path is None:
        raise UsageError(f"--{what} is required")
    if not Path(path).exists():
        raise UsageError(f"dataset not found: {path}")
    m = cfg.model
    return read_dataset(path, m.vocab_size, m.d_frame, m.max_frames, m.max_words)


def _seeds(args, cfg: ExperimentConfig) -> list[int]:
    if getattr(args, "seeds", None):
        return [int(s) for s in args.seeds.split(",")]
    return [cfg.train.seed]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _report(task: str, metric: str, value: float, n: int, seed: int, checkpoint, **extra) -> dict:
    return {"task": task, "metric": metric, "value": value, "n": n, "seed": seed,
            "checkpoint": str(checkpoint) if checkpoint else None, **extra}


def _load_trainer(path: str | None) -> Trainer:
    if path is None:
        raise UsageError("--checkpoint is required")
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path, timing=False)


def _head_tensors(head: QAHead) -> dict[str, np.ndarray]:
    out = {f"head/{k}": v for k, v in head.state_dict().items()}
    out["meta/n_answers"] = np.array([head.n_answers], dtype=np.uint64)
    return out


def _load_head(path: str, d_model: int) -> QAHead:
    tensors = ckpt.read_tensors(path)
    if "meta/n_answers" not in tensors:
        raise UsageError(f"{path} is not a QA head checkpoint")
    n = int(tensors["meta/n_answers"][0])
    head = QAHead(d_model, n, np.random.default_rng(0))
    state = {k[len("head/"):]: v for k, v in tensors.items() if k.startswith("head/")}
    if "linear.w" not in state:
        raise UsageError(f"{path} has no head weights")
    if state["linear.w"].shape[0] != 2 * d_model:
        raise UsageError(f"QA head was trained for d_model={state['linear.w'].shape[0] // 2}, checkpoint has {d_model}")
    head.load_state_dict(state)
    return head


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        n_pairs=args.pairs, n_concepts=args.concepts, d_frame=args.d_frame, vocab_size=args.vocab,
        frames_min=args.frames_min, frames_max=args.frames_max, words_min=args.words_min,
        words_max=args.words_max, feature_noise=args.feature_noise, token_noise=args.token_noise,
        word_signal=args.word_signal, seed=args.seed if args.seed is not None else 0,
    )
    try:
        pairs = generate_synthetic(spec)
    except DatasetError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    if out.suffix != ".jsonl":
        out = out / "dataset.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_dataset(out, pairs)
    print(f"wrote {n} pairs to {out}: {spec.n_concepts} concepts, d_frame={spec.d_frame}, "
          f"vocab={spec.vocab_size}, frames {spec.frames_min}-{spec.frames_max}, "
          f"words {spec.words_min}-{spec.words_max}")
    return 0


def cmd_pretrain(args) -> int:
    extra = {}
    if args.epochs is not None:
        extra["epochs"] = args.epochs
    if args.losses:
        extra["losses"] = tuple(s.strip() for s in args.losses.split(",") if s.strip())
    try:
        cfg = _config(args, extra)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    if args.preset == "table2":
        report = table2(cfg, _seeds(args, cfg), out)
        print(format_table(report["rows"], ("name", "finetuned_r1", "zero_shot_r1")))
        print(f"report: {out / 'table2.json'}")
        return 0
    train = _load_pairs(args.data, cfg, "data")
    out.mkdir(parents=True, exist_ok=True)
    trainer = pretrain(cfg, train, out)
    rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines() if line]
    last = rows[-1]["loss_total"] if rows else float("nan")
    print(f"{trainer.step} steps over {cfg.train.epochs} epochs; final loss {last:.4f}; "
          f"checkpoint {out / 'checkpoint.ccbt'}")
    return 0


def cmd_finetune(args) -> int:
    trainer = _load_trainer(args.checkpoint)
    cfg = trainer.cfg
    seed = args.seed if args.seed is not None else cfg.train.seed
    train = _load_pairs(args.data, cfg, "data")
    test = _load_pairs(args.test, cfg, "test") if args.test else None
    out = Path(args.out)
    overrides = parse_overrides(args.set)
    known = {"retrieval": RetrievalConfig, "qa": QAConfig}.get(args.task)
    if known is not None:
        unknown = set(overrides) - set(known.__dataclass_fields__) - {"seed"}
        if unknown:
            raise UsageError(f"unknown {args.task} fine-tuning keys {sorted(unknown)}")
        overrides.pop("seed", None)
    if args.task == "retrieval":
        rc = RetrievalConfig(seed=seed, **overrides)
        losses = finetune_retrieval(trainer.model, train, rc)
        save_checkpoint(out / "checkpoint.ccbt", trainer)
        body = {"final_loss": losses[-1] if losses else None}
        if test:
            r = zero_shot_recall(trainer.model, test)
            body.update(_report("retrieval", "R@1", r[1], len(test), seed, out / "checkpoint.ccbt",
                                recall={str(k): v for k, v in r.items()}))
    elif args.task == "qa":
        qc = QAConfig(seed=seed, **overrides)
        head, acc = finetune_qa(trainer.model, train, test or [], qc)
        save_checkpoint(out / "checkpoint.ccbt", trainer)
        ckpt.write_tensors(out / "qa_head.ccbt", _head_tensors(head))
        body = _report("qa", "accuracy", acc, len(test or []), seed, out / "checkpoint.ccbt",
                       head=str(out / "qa_head.ccbt"))
    else:
        raise UsageError("caption needs no fine-tuning beyond pre-training; use eval --task caption")
    _write_json(out / "finetune_report.json", body)
    print(json.dumps(body))
    return 0


def cmd_eval(args) -> int:
    if args.sweep_memory:
        return _sweep(args)
    trainer = _load_trainer(args.checkpoint)
    cfg = trainer.cfg
    pairs = _load_pairs(args.data, cfg, "data")
    seed = cfg.train.seed
    if args.task == "retrieval":
        if len(pairs) < 1:
            raise UsageError("retrieval needs at least one pair")
        r = zero_shot_recall(trainer.model, pairs)
        rep = _report("retrieval", "R@1", r[1], len(pairs), seed, args.checkpoint,
                      recall={str(k): v for k, v in r.items()})
    elif args.task == "qa":
        if not args.head:
            raise UsageError("eval --task qa needs --head from 'finetune --task qa'")
        head = _load_head(args.head, cfg.model.d_model)
        try:
            acc = qa_accuracy(trainer.model, head, pairs)
        except ValueError as e:
            raise UsageError(str(e)) from None
        rep = _report("qa", "accuracy", acc, len(pairs), seed, args.checkpoint)
    else:
        c = caption_eval(trainer.model, pairs)
        rep = _report("caption", "perplexity", c["perplexity"], c["n_tokens"], seed, args.checkpoint,
                      token_accuracy=c["token_accuracy"])
    out = Path(args.out)
    _write_json(out / f"eval_{args.task}.json", rep)
    print(json.dumps(rep))
    return 0


def _sweep(args) -> int:
    try:
        sizes = [int(k) for k in args.sweep_memory.split(",") if k.strip()]
    except ValueError:
        raise UsageError(f"--sweep-memory expects comma-separated integers, got {args.sweep_memory!r}") from None
    if not sizes or min(sizes) < 1:
        raise UsageError("--sweep-memory needs positive sizes")
    cfg = _load_trainer(args.checkpoint).cfg if args.checkpoint else _config(args)
    out = Path(args.out)
    report = memory_sweep(cfg, sizes, _seeds(args, cfg), out)
    print(format_table(report["rows"], ("memory_size", "zero_shot_r1", "zero_shot_r5")))
    print(f"report: {out / 'sweep_memory.json'}")
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    reports = run_suite(args.seeds, base_seed=args.seed or 0)
    print(format_reports(reports, time.perf_counter() - t0))
    return 0 if all(r.passed for r in reports) else 1


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cocobert", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic JSON-Lines dataset")
    _common(g)
    g.add_argument("--pairs", type=int, default=2000)
    g.add_argument("--concepts", type=int, default=8)
    g.add_argument("--d-frame", type=int, default=32)
    g.add_argument("--vocab", type=int, default=64)
    g.add_argument("--frames-min", type=int, default=4)
    g.add_argument("--frames-max", type=int, default=12)
    g.add_argument("--words-min", type=int, default=3)
    g.add_argument("--words-max", type=int, default=10)
    g.add_argument("--feature-noise", type=float, default=0.3)
    g.add_argument("--token-noise", type=float, default=0.1)
    g.add_argument("--word-signal", type=float, default=1.0)
    g.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pre-train; --preset table2 runs the loss ablation")
    _common(p)
    p.add_argument("--data", help="training dataset (JSON Lines)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--losses", help=f"comma list from {','.join(TABLE2_ROWS['base+co_im+co_id'])},cmm")
    p.add_argument("--seeds", help="comma list of seeds for --preset table2")
    p.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="fine-tune a checkpoint for retrieval or QA")
    _common(f)
    f.add_argument("--checkpoint")
    f.add_argument("--task", choices=TASKS, required=True)
    f.add_argument("--data", help="labelled training pairs")
    f.add_argument("--test", help="held-out pairs for the report")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="evaluate a checkpoint; --sweep-memory re-pretrains per K")
    _common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--task", choices=TASKS, default="retrieval")
    e.add_argument("--data", help="evaluation pairs")
    e.add_argument("--head", help="QA head from 'finetune --task qa'")
    e.add_argument("--sweep-memory", metavar="K1,K2,...")
    e.add_argument("--seeds", help="comma list of seeds for the sweep")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "preset", None) and args.preset not in PRESETS:
        parser.error(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"cocobert {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (DatasetError, ckpt.CheckpointError, ValueError) as e:
        print(f"cocobert {args.command}: error: {e}", file=sys.stderr)
        return 2
    except NonFiniteLoss as e:
        print(f"cocobert {args.command}: aborted: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
