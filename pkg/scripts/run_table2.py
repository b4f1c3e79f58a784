"""Loss ablation on the synthetic corpus: five objective sets, several seeds.

    python scripts/run_table2.py --seeds 0,1,2 --out runs/table2
"""

import argparse
import logging
from pathlib import Path

from cocobert.config import build_config
from cocobert.downstream import RetrievalConfig
from cocobert.experiments import format_table, table2


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--finetune-epochs", type=int, default=2)
    ap.add_argument("--out", default="runs/table2")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = build_config("table2", overrides={"epochs": args.epochs})
    seeds = [int(s) for s in args.seeds.split(",")]
    report = table2(cfg, seeds, Path(args.out), finetune=RetrievalConfig(epochs=args.finetune_epochs))
    print(format_table(report["rows"], ("name", "finetuned_r1", "zero_shot_r1")))


if __name__ == "__main__":
    main()
