"""Command-line entry points.

Subcommands cover the whole workflow: generate the synthetic dataset, build
prior maps from bbox annotations, generate chest ROI masks, train, evaluate,
and render qualitative overlays. Every command writes a run manifest next to
its outputs. Exit codes: 0 success, 1 runtime failure, 2 bad arguments.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np


def _limit_threads() -> None:
    workers = os.environ.get("APAM_NUM_WORKERS")
    if workers:
        import torch

        torch.set_num_threads(max(1, int(workers)))


def _parse_thresholds(text: str) -> list[float]:
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}")
    if not values or any(not 0 <= v < 1 for v in values):
        raise argparse.ArgumentTypeError("thresholds must be in [0, 1)")
    return values


def cmd_gen_synth(args) -> int:
    from .manifest import RunManifest
    from .synth import REFERENCE_SYNTH, SynthConfig, write_synth_dataset

    cfg = REFERENCE_SYNTH
    if args.config:
        cfg = SynthConfig(**json.loads(Path(args.config).read_text()))
    overrides = {}
    if args.n_images is not None:
        overrides["n_images"] = args.n_images
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        base = asdict(cfg)
        base.update(overrides)
        cfg = SynthConfig(**base)

    manifest = RunManifest(
        subcommand="gen-synth", config=asdict(cfg), outputs={"dataset": str(args.out)}
    )
    write_synth_dataset(args.out, cfg)
    manifest.seed = cfg.seed
    manifest.write(args.out)
    print(f"wrote {cfg.n_images} images to {args.out}")
    return 0


def cmd_gen_priors(args) -> int:
    from .data import load_bbox_index
    from .manifest import RunManifest
    from .priors import build_prior_maps, save_prior_maps

    classes_path = Path(args.classes)
    if not classes_path.is_file():
        print(f"error: classes file not found: {classes_path}", file=sys.stderr)
        return 2
    class_names = [ln.strip() for ln in classes_path.read_text().splitlines() if ln.strip()]

    localization_classes = None
    if args.class_map:
        mapping = json.loads(Path(args.class_map).read_text())
        localization_classes = list(mapping)

    bbox_path = Path(args.bbox)
    if not bbox_path.is_file():
        print(f"error: bbox file not found: {bbox_path}", file=sys.stderr)
        return 2
    annotations = load_bbox_index(
        bbox_path, class_names, localization_classes=localization_classes
    )
    if not annotations:
        print("warning: no annotations found; all priors will be uniform", file=sys.stderr)

    resolution = (args.resolution, args.resolution)
    priors = build_prior_maps(annotations, class_names, resolution)
    save_prior_maps(priors, args.out)
    manifest = RunManifest(
        subcommand="gen-priors",
        config={"resolution": list(resolution)},
        inputs={"bbox": str(bbox_path), "classes": str(classes_path)},
        outputs={"priors": str(args.out)},
    )
    manifest.write(args.out)
    counts = {n: p.n_annotations for n, p in zip(priors.class_names, priors.maps)}
    print(f"wrote {len(priors.maps)} prior maps to {args.out}")
    for name, count in counts.items():
        kind = "data-driven" if count else "uniform"
        print(f"  {name}: {count} annotations ({kind})")
    return 0


def cmd_gen_roi(args) -> int:
    from PIL import Image

    from .data import read_image
    from .manifest import RunManifest
    from .roi import (
        ExternalMapSegmenter,
        OtsuLungSegmenter,
        RoiParams,
        generate_roi_mask,
    )

    image_dir = Path(args.images)
    if not image_dir.is_dir():
        print(f"error: image directory not found: {image_dir}", file=sys.stderr)
        return 2
    if args.segmenter == "otsu":
        segmenter = OtsuLungSegmenter()
    elif args.segmenter.startswith("external:"):
        segmenter = ExternalMapSegmenter(args.segmenter.split(":", 1)[1])
    else:
        print(f"error: unknown segmenter {args.segmenter!r}", file=sys.stderr)
        return 2

    params = RoiParams(threshold=args.threshold, dilation_radius=args.radius)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        print(f"error: no images under {image_dir}", file=sys.stderr)
        return 1
    for path in files:
        image = read_image(path)
        result = generate_roi_mask(image, segmenter, params, image_id=path.name)
        Image.fromarray(result.mask * np.uint8(255), mode="L").save(out_dir / f"{path.stem}.png")
    manifest = RunManifest(
        subcommand="gen-roi",
        config={
            "segmenter": args.segmenter,
            "threshold": params.threshold,
            "dilation_radius": params.dilation_radius,
        },
        inputs={"images": str(image_dir)},
        outputs={"masks": str(out_dir), "n_masks": len(files)},
    )
    manifest.write(out_dir)
    print(f"wrote {len(files)} roi masks to {out_dir}")
    return 0


def _load_bank(args, model_config, spec=None):
    from .data import load_dataset
    from .experiment import SampleBank
    from .priors import load_prior_maps

    dataset = load_dataset(
        args.data, holdout_bbox_images=getattr(args, "holdout_bbox_images", False)
    )
    priors = None
    if model_config.needs_priors:
        if not args.priors:
            raise ValueError(
                f"attention mode {model_config.attention!r} requires --priors"
            )
        priors = load_prior_maps(args.priors)
    elif getattr(args, "priors", None):
        print("warning: --priors ignored by this attention mode", file=sys.stderr)
    roi_source = None
    if model_config.needs_roi:
        roi_source = args.roi if args.roi else "fallback"
    return SampleBank(dataset, model_config, priors=priors, roi_source=roi_source, spec=spec)


def cmd_train(args) -> int:
    import torch

    from .manifest import RunManifest
    from .model import ModelConfig, build_model
    from .training import TrainConfig, train_model

    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    model_keys = {f for f in ModelConfig.__dataclass_fields__}
    train_keys = {f for f in TrainConfig.__dataclass_fields__}
    unknown = set(raw) - model_keys - train_keys
    if unknown:
        print(f"error: unknown config keys {sorted(unknown)}", file=sys.stderr)
        return 2
    model_config = ModelConfig(**{k: v for k, v in raw.items() if k in model_keys})
    train_config = TrainConfig(**{k: v for k, v in raw.items() if k in train_keys})

    bank = _load_bank(args, model_config)
    if model_config.n_classes != len(bank.dataset.class_names):
        print(
            f"error: config n_classes={model_config.n_classes} but dataset has "
            f"{len(bank.dataset.class_names)} classes",
            file=sys.stderr,
        )
        return 2

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        subcommand="train",
        config={"model": asdict(model_config), "train": asdict(train_config)},
        inputs={
            "data": str(args.data),
            "priors": str(args.priors) if args.priors else None,
            "roi": str(args.roi) if args.roi else None,
        },
        outputs={"run_dir": str(out_dir)},
        seed=train_config.seed,
    )
    model = build_model(model_config, seed=train_config.seed)
    result = train_model(model, bank, train_config, out_dir=out_dir)
    manifest.outputs["best_epoch"] = result.best_epoch
    manifest.outputs["best_val_mean_auc"] = result.best_val_auc
    manifest.write(out_dir)
    print(
        f"done: best epoch {result.best_epoch} "
        f"(val mean auc {result.best_val_auc:.4f}); checkpoints in {out_dir}"
    )
    return 0


def cmd_eval(args) -> int:
    from .experiment import build_eval_report
    from .manifest import RunManifest
    from .model import load_checkpoint

    model, meta = load_checkpoint(args.checkpoint)
    bank = _load_bank(args, model.config)
    records = bank.split_records(args.split)
    if not records:
        print(f"error: split {args.split!r} is empty", file=sys.stderr)
        return 1
    report = build_eval_report(
        model,
        bank,
        records,
        mode=args.mode,
        thresholds=tuple(args.iou_thresholds),
        include_negatives=args.include_negatives,
    )
    out_dir = Path(args.out)
    report.write(out_dir)
    manifest = RunManifest(
        subcommand="eval",
        config={
            "mode": args.mode,
            "split": args.split,
            "iou_thresholds": list(args.iou_thresholds),
            "include_negatives": args.include_negatives,
        },
        inputs={"checkpoint": str(args.checkpoint), "data": str(args.data)},
        outputs={"report": str(out_dir / "report.json")},
    )
    manifest.write(out_dir)
    print(report.to_text())
    print(f"report written to {out_dir}")
    return 0


def cmd_render(args) -> int:
    from PIL import Image

    from .evaluation import extract_boxes, heatmap_to_mask, map_bbox_to_crop, normalize_heatmap
    from .manifest import RunManifest
    from .model import load_checkpoint
    from .render import render_case

    model, _ = load_checkpoint(args.checkpoint)
    bank = _load_bank(args, model.config)

    if args.images.startswith("@"):
        wanted = [
            ln.strip()
            for ln in Path(args.images[1:]).read_text().splitlines()
            if ln.strip()
        ]
    else:
        wanted = [tok.strip() for tok in args.images.split(",") if tok.strip()]
    by_id = {r.image_id: r for r in bank.dataset.records}
    by_image = bank.dataset.bboxes_by_image()

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rendered = 0
    import torch

    for image_id in wanted:
        record = by_id.get(image_id)
        if record is None or not record.path.is_file():
            print(f"warning: skipping unknown image {image_id!r}", file=sys.stderr)
            continue
        batch = bank.batch([record], train=False)
        with torch.no_grad():
            model.eval()
            out = model(*batch.model_args())
            scores = torch.sigmoid(out.logits)[0].numpy()
            cams = out.cams[0].numpy()
        window = batch.windows[0]

        # show the strongest-scoring class unless the image has annotations
        anns = [a for a in by_image.get(image_id, []) if not a.flagged]
        class_ids = sorted({a.class_id for a in anns}) or [int(scores.argmax())]
        crop = np.clip(
            (batch.images[0].transpose(1, 2, 0) * bank.spec.channel_std)
            + bank.spec.channel_mean,
            0,
            1,
        )
        crop_u8 = (crop * 255).astype(np.uint8)
        for k in class_ids:
            heat = normalize_heatmap(cams[k], (window.size, window.size))
            pred = extract_boxes(heatmap_to_mask(heat)) if scores[k] >= args.threshold else []
            gt = []
            for a in anns:
                if a.class_id == k:
                    mapped = map_bbox_to_crop(a.x, a.y, a.w, a.h, window)
                    if mapped is not None:
                        gt.append(mapped)
            name = bank.dataset.class_names[k]
            caption = f"{image_id} {name} p={scores[k]:.2f}"
            panel = render_case(
                crop_u8, heat if scores[k] >= args.threshold else None, pred, gt, caption
            )
            panel.save(out_dir / f"{Path(image_id).stem}_{k:02d}.png")
            rendered += 1
    if rendered == 0:
        print("error: nothing rendered (no requested image was found)", file=sys.stderr)
        return 1
    manifest = RunManifest(
        subcommand="render",
        config={"threshold": args.threshold},
        inputs={"checkpoint": str(args.checkpoint), "data": str(args.data)},
        outputs={"overlays": str(out_dir), "n_panels": rendered},
    )
    manifest.write(out_dir)
    print(f"wrote {rendered} overlay panels to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apamnet",
        description="Anatomy-prior attention pipeline for chest x-ray "
        "classification and lesion localization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate the synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="JSON file of generator parameters")
    p.add_argument("--n-images", type=int, help="override image count")
    p.add_argument("--seed", type=int, help="override rng seed")
    p.set_defaults(fn=cmd_gen_synth)

    p = sub.add_parser("gen-priors", help="build per-class prior maps from bbox annotations")
    p.add_argument("--bbox", required=True, help="bbox csv file")
    p.add_argument("--classes", required=True, help="classes.txt (one name per line)")
    p.add_argument("--out", required=True, help="output prior directory")
    p.add_argument("--resolution", type=int, default=256, help="canvas edge (default 256)")
    p.add_argument(
        "--class-map",
        help="JSON list/object of class names eligible for data-driven priors",
    )
    p.set_defaults(fn=cmd_gen_priors)

    p = sub.add_parser("gen-roi", help="generate chest roi masks for an image directory")
    p.add_argument("--images", required=True, help="input image directory")
    p.add_argument("--out", required=True, help="output mask directory")
    p.add_argument("--radius", type=int, default=8, help="dilation radius (default 8)")
    p.add_argument(
        "--threshold", type=float, default=0.5, help="binarization threshold (default 0.5)"
    )
    p.add_argument(
        "--segmenter",
        default="otsu",
        help='"otsu" or "external:DIR" for precomputed soft maps',
    )
    p.set_defaults(fn=cmd_gen_roi)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON file of model/training parameters")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--priors", help="prior map directory")
    p.add_argument("--roi", help="roi mask directory (defaults to the otsu fallback)")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument(
        "--holdout-bbox-images",
        action="store_true",
        help="force bbox-annotated images into the test split",
    )
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--priors", help="prior map directory")
    p.add_argument("--roi", help="roi mask directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--mode", default="cls", choices=("cls", "loc", "both"))
    p.add_argument(
        "--iou-thresholds",
        type=_parse_thresholds,
        default=[0.1, 0.3],
        help='comma-separated, e.g. "0.1,0.3" (default)',
    )
    p.add_argument(
        "--include-negatives",
        action="store_true",
        help="also score box-free positive labels as negative cases",
    )
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("render", help="render heatmap/box overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--priors", help="prior map directory")
    p.add_argument("--roi", help="roi mask directory")
    p.add_argument(
        "--images", required=True, help="comma-separated image ids, or @file with one per line"
    )
    p.add_argument(
        "--threshold", type=float, default=0.5, help="score needed to draw a heatmap"
    )
    p.add_argument("--out", required=True, help="overlay output directory")
    p.set_defaults(fn=cmd_render)
    return parser


def main(argv=None) -> int:
    _limit_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
