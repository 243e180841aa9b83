"""Synthetic chest-phantom dataset for end-to-end pipeline validation.

Each image is a bright elliptical "body" with two darker "lung" fields.
Diseases are bright elliptical lesions confined to class-specific regions,
so a model with access to region priors has a real, learnable advantage.
The generator is fully deterministic given its seed and emits the same
directory layout the loaders expect (classes.txt, labels.csv, bboxes.csv,
images/, meta.json).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


def _default_regions() -> list[tuple[float, float, float, float]]:
    # (cy, cx, ry, rx) as fractions of the canvas; one region per class,
    # placed inside the two lung fields
    return [
        (0.32, 0.30, 0.10, 0.09),
        (0.32, 0.70, 0.10, 0.09),
        (0.62, 0.30, 0.10, 0.09),
        (0.62, 0.70, 0.10, 0.09),
    ]


@dataclass
class SynthConfig:
    """Parameters of the phantom generator."""

    n_images: int = 2000
    image_edge: int = 256
    n_classes: int = 4
    lesion_regions: list[tuple[float, float, float, float]] = field(
        default_factory=_default_regions
    )
    lesion_delta: float = 0.35
    lesion_radius_frac: tuple[float, float] = (0.035, 0.07)
    noise_sigma: float = 0.04
    label_prob: float = 0.35
    seed: int = 7

    def __post_init__(self):
        if self.n_classes > len(self.lesion_regions):
            raise ValueError("need one lesion region per class")
        if not 0.0 < self.label_prob < 1.0:
            raise ValueError("label_prob must be in (0, 1)")

    def class_names(self) -> list[str]:
        return [f"Lesion{chr(ord('A') + k)}" for k in range(self.n_classes)]


REFERENCE_SYNTH = SynthConfig()


def _ellipse_mask(edge: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    ys = np.arange(edge)[:, None]
    xs = np.arange(edge)[None, :]
    return ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0


def _phantom(edge: int, rng: np.random.Generator) -> np.ndarray:
    """Body + lungs background with mild per-image jitter."""
    img = np.full((edge, edge), 0.08, dtype=np.float32)
    body = _ellipse_mask(edge, 0.52 * edge, 0.50 * edge, 0.46 * edge, 0.42 * edge)
    img[body] = 0.65 + rng.uniform(-0.03, 0.03)
    for lx in (0.30, 0.70):
        jy = rng.uniform(-0.01, 0.01) * edge
        jx = rng.uniform(-0.01, 0.01) * edge
        lung = _ellipse_mask(
            edge, 0.47 * edge + jy, lx * edge + jx, 0.30 * edge, 0.155 * edge
        )
        img[lung] = 0.30 + rng.uniform(-0.02, 0.02)
    return img


def _place_lesion(
    img: np.ndarray, cfg: SynthConfig, class_id: int, rng: np.random.Generator
) -> tuple[float, float, float, float]:
    """Draw one bright lesion in the class region; returns its (x, y, w, h)."""
    edge = cfg.image_edge
    cy_f, cx_f, ry_f, rx_f = cfg.lesion_regions[class_id]
    lo, hi = cfg.lesion_radius_frac
    ry = int(round(rng.uniform(lo, hi) * edge))
    rx = int(round(rng.uniform(lo, hi) * edge))
    ry, rx = max(ry, 2), max(rx, 2)
    # keep the whole lesion inside the region box
    cy = int(round(cy_f * edge + rng.uniform(-1, 1) * (ry_f * edge - ry)))
    cx = int(round(cx_f * edge + rng.uniform(-1, 1) * (rx_f * edge - rx)))
    blob = _ellipse_mask(edge, cy, cx, ry, rx)
    img[blob] = np.clip(img[blob] + cfg.lesion_delta, 0.0, 1.0)
    return float(cx - rx), float(cy - ry), float(2 * rx + 1), float(2 * ry + 1)


def generate_sample(cfg: SynthConfig, rng: np.random.Generator):
    """One (image, labels, bboxes) draw; bboxes are (class_id, x, y, w, h)."""
    img = _phantom(cfg.image_edge, rng)
    labels = (rng.random(cfg.n_classes) < cfg.label_prob).astype(np.uint8)
    boxes = []
    for k in np.flatnonzero(labels):
        x, y, w, h = _place_lesion(img, cfg, int(k), rng)
        boxes.append((int(k), x, y, w, h))
    img = img + rng.normal(0.0, cfg.noise_sigma, img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0), labels, boxes


def write_synth_dataset(out_dir, cfg: SynthConfig = REFERENCE_SYNTH) -> Path:
    """Generate the dataset under `out_dir` and return that path."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    class_names = cfg.class_names()
    rng = np.random.default_rng(cfg.seed)

    label_rows = []
    bbox_rows = []
    for i in range(cfg.n_images):
        image_id = f"synth_{i:05d}.png"
        img, labels, boxes = generate_sample(cfg, rng)
        Image.fromarray((img * 255.0 + 0.5).astype(np.uint8), mode="L").save(
            image_dir / image_id
        )
        finding = "|".join(class_names[k] for k in np.flatnonzero(labels))
        label_rows.append((image_id, finding, f"P{i:05d}"))
        for class_id, x, y, w, h in boxes:
            bbox_rows.append((image_id, class_names[class_id], x, y, w, h))

    (out_dir / "classes.txt").write_text("".join(n + "\n" for n in class_names))
    with open(out_dir / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Image Index", "Finding Labels", "Patient ID"])
        writer.writerows(label_rows)
    with open(out_dir / "bboxes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Image Index", "Finding Label", "Bbox [x", "y", "w", "h]"])
        writer.writerows(bbox_rows)
    (out_dir / "meta.json").write_text(
        json.dumps({"canvas": [cfg.image_edge, cfg.image_edge], "seed": cfg.seed}, indent=2)
        + "\n"
    )
    return out_dir
