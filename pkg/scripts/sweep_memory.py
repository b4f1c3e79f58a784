"""Zero-shot retrieval as a function of key-memory size (full objective)."""

import argparse
import logging
from pathlib import Path

from cocobert.config import FULL_COCO, build_config
from cocobert.experiments import format_table, memory_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="64,256,1024")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = build_config("table2", overrides={"epochs": args.epochs, "losses": FULL_COCO})
    report = memory_sweep(cfg, [int(k) for k in args.sizes.split(",")],
                          [int(s) for s in args.seeds.split(",")], Path(args.out))
    print(format_table(report["rows"], ("memory_size", "zero_shot_r1", "zero_shot_r5")))


if __name__ == "__main__":
    main()
