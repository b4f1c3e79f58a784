"""Zero-shot R@1 after each pre-training epoch, one seed, full objective.

Prints one line per epoch so the learning curve can be eyeballed.
"""

import argparse
import time

from cocobert.config import build_config, parse_overrides
from cocobert.downstream import zero_shot_recall
from cocobert.experiments import synthetic_split
from cocobert.training import Trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    cfg = build_config(overrides={"seed": args.seed, **parse_overrides(args.set)})
    train, test = synthetic_split(cfg, args.seed)
    tr = Trainer(cfg, train)
    t0 = time.perf_counter()
    print(f"epoch 0  R@1 {zero_shot_recall(tr.model, test)[1]:.3f}")
    for epoch in range(1, args.epochs + 1):
        rows = tr.train_epochs(1)
        r = zero_shot_recall(tr.model, test)
        print(f"epoch {epoch}  loss {rows[-1]['loss_total']:.3f}  R@1 {r[1]:.3f}  R@5 {r[5]:.3f}  "
              f"({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
