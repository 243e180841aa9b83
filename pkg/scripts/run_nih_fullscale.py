#!/usr/bin/env python3
"""Full-scale training recipe for the NIH chest x-ray dataset.

Expects a dataset directory already converted to the standard layout
(classes.txt, labels.csv, bboxes.csv, images/) plus, ideally, a GPU and a
real lung segmenter. The published recipe is 15 epochs at batch 16 with a
densenet backbone; on CPU this takes days, so the script refuses to start
unless --i-know-this-is-slow is passed when no GPU is visible.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from apamnet.cli import main as cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", required=True, help="dataset directory")
    parser.add_argument("--workdir", default="runs/nih", help="output root")
    parser.add_argument("--roi", help="precomputed roi mask directory (recommended)")
    parser.add_argument("--backbone-weights", help="local densenet121 state dict")
    parser.add_argument("--epochs", type=int, default=15)
    parser.add_argument("--fpn", default="none", choices=("none", "additive", "concat"))
    parser.add_argument("--i-know-this-is-slow", action="store_true")
    args = parser.parse_args()

    import torch

    if not torch.cuda.is_available() and not args.i_know_this_is_slow:
        print(
            "no gpu detected; a full 15-epoch densenet run on cpu takes days.\n"
            "pass --i-know-this-is-slow to proceed anyway.",
            file=sys.stderr,
        )
        return 2

    data = Path(args.data)
    classes = [
        ln.strip()
        for ln in (data / "classes.txt").read_text().splitlines()
        if ln.strip()
    ]
    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    priors = work / "priors"

    rc = cli(["gen-priors", "--bbox", str(data / "bboxes.csv"),
              "--classes", str(data / "classes.txt"), "--out", str(priors)])
    if rc != 0:
        return rc

    config = {
        "backbone": "densenet121",
        "fpn": args.fpn,
        "attention": "prior_and_roi",
        "n_classes": len(classes),
        "batch_size": 16,
        "epochs": args.epochs,
        "lr0": 1e-4,
        "weight_decay": 1e-4,
        "seed": 0,
    }
    if args.backbone_weights:
        config["backbone_weights"] = args.backbone_weights
    cfg_path = work / "config.json"
    cfg_path.write_text(json.dumps(config, indent=2))

    train_args = ["train", "--config", str(cfg_path), "--data", str(data),
                  "--priors", str(priors), "--out", str(work / "run"),
                  "--holdout-bbox-images"]
    if args.roi:
        train_args += ["--roi", args.roi]
    rc = cli(train_args)
    if rc != 0:
        return rc

    eval_args = ["eval", "--checkpoint", str(work / "run" / "best.ckpt"),
                 "--data", str(data), "--priors", str(priors),
                 "--mode", "both", "--iou-thresholds", "0.1,0.2,0.3,0.4,0.5",
                 "--out", str(work / "report")]
    if args.roi:
        eval_args += ["--roi", args.roi]
    return cli(eval_args)


if __name__ == "__main__":
    sys.exit(main())
