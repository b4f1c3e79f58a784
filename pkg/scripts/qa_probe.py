"""QA head accuracy: pre-trained backbone against a from-scratch one.

Varies the number of labelled pairs and the fine-tuning recipe, to see
where pre-training helps on the synthetic concept labels.
"""

import argparse
import copy


from cocobert.config import build_config
from cocobert.downstream import QAConfig, finetune_qa
from cocobert.experiments import pretrain, synthetic_split
from cocobert.model import CoCoBert


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--epochs", type=int, default=4, help="pre-training epochs")
    ap.add_argument("--labels", default="100,400,2000", help="labelled training pairs")
    ap.add_argument("--qa-epochs", type=int, default=3)
    ap.add_argument("--lr", type=float, default=2e-4)
    ap.add_argument("--head-only", action="store_true")
    ap.add_argument("--feature-noise", type=float, default=None)
    args = ap.parse_args()
    over = {"epochs": args.epochs}
    if args.feature_noise is not None:
        over["feature_noise"] = args.feature_noise
    cfg = build_config(overrides=over)
    for seed in (int(s) for s in args.seeds.split(",")):
        cfg_s = build_config(overrides={**over, "seed": seed})
        train, test = synthetic_split(cfg_s, seed)
        model = pretrain(cfg_s, train).model
        for n in (int(x) for x in args.labels.split(",")):
            qc = QAConfig(epochs=args.qa_epochs, lr=args.lr, seed=seed, train_backbone=not args.head_only)
            sub = train[:n]
            _, a_pre = finetune_qa(copy.deepcopy(model), sub, test, qc)
            fresh = CoCoBert(cfg.model, seed=seed, memory_size=cfg.train.memory_size)
            _, a_scr = finetune_qa(fresh, sub, test, qc)
            print(f"seed {seed}  labels {n:5d}  pretrained {a_pre:.3f}  scratch {a_scr:.3f}  "
                  f"diff {a_pre - a_scr:+.3f}")


if __name__ == "__main__":
    main()
