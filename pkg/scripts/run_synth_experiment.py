#!/usr/bin/env python3
"""Reference experiment on the synthetic phantom dataset.

Drives the public CLI end to end: dataset generation, prior maps, ROI masks,
training of the attention model and the plain baseline, evaluation of both,
and a couple of qualitative overlays. Everything lands under --workdir so a
single diff of report.json files shows the attention effect.

Desk-scale by design: a few minutes on CPU. Pass --epochs/--n-images to
scale up or down.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from apamnet.cli import main as cli


def run(argv: list[str]) -> None:
    print(f"$ apamnet {' '.join(argv)}", flush=True)
    rc = cli(argv)
    if rc != 0:
        sys.exit(rc)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="runs/synth", help="output root")
    parser.add_argument("--n-images", type=int, default=2000)
    parser.add_argument("--epochs", type=int, default=2)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    data = work / "data"
    priors = work / "priors"
    rois = work / "rois"

    run(["gen-synth", "--out", str(data), "--n-images", str(args.n_images),
         "--seed", str(args.seed)])
    run(["gen-priors", "--bbox", str(data / "bboxes.csv"),
         "--classes", str(data / "classes.txt"), "--out", str(priors)])
    run(["gen-roi", "--images", str(data / "images"), "--out", str(rois)])

    common = {
        "backbone": "toy_cnn",
        "fpn": "none",
        "n_classes": 4,
        "batch_size": 16,
        "epochs": args.epochs,
        "lr0": 1e-4,
        "seed": args.seed,
    }
    for attention in ("prior_and_roi", "baseline"):
        cfg_path = work / f"config_{attention}.json"
        cfg_path.write_text(json.dumps({**common, "attention": attention}, indent=2))
        run_dir = work / f"run_{attention}"
        train_args = ["train", "--config", str(cfg_path), "--data", str(data),
                      "--out", str(run_dir)]
        if attention == "prior_and_roi":
            train_args += ["--priors", str(priors), "--roi", str(rois)]
        run(train_args)
        eval_args = ["eval", "--checkpoint", str(run_dir / "best.ckpt"),
                     "--data", str(data), "--mode", "both",
                     "--out", str(work / f"report_{attention}")]
        if attention == "prior_and_roi":
            eval_args += ["--priors", str(priors), "--roi", str(rois)]
        run(eval_args)

    ids = ",".join(f"synth_{i:05d}.png" for i in range(4))
    run(["render", "--checkpoint", str(work / "run_prior_and_roi" / "best.ckpt"),
         "--data", str(data), "--priors", str(priors), "--roi", str(rois),
         "--images", ids, "--out", str(work / "overlays")])

    summary = {}
    for attention in ("prior_and_roi", "baseline"):
        report = json.loads((work / f"report_{attention}" / "report.json").read_text())
        summary[attention] = report["mean_auc"]
    gap = summary["prior_and_roi"] - summary["baseline"]
    print(
        f"\nmean auc: attention {summary['prior_and_roi']:.4f}, "
        f"baseline {summary['baseline']:.4f}, gap {gap:+.4f}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
