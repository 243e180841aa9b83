"""Classification and localization metrics.

Everything here is plain numpy so results are independent of the training
framework. Localization follows the CAM-thresholding recipe: upsample the
class activation map to the input resolution, rescale to [0, 255], keep
pixels strictly above 127, extract outer contours, and score each box
against ground truth with a strict IoU threshold.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with [min, max) pixel semantics."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ValueError(
                f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        return cls(x, y, x + w, y + h)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes."""
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def roc_auc(labels: np.ndarray, scores: np.ndarray, on_single_class: str = "raise") -> float:
    """Area under the ROC curve via average ranks; ties count one half.

    Equivalent to the probability that a random positive outscores a random
    negative, with ties worth 0.5. `on_single_class` picks the behavior when
    only one label value is present: "raise" or "nan".
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError("labels and scores must be equal-length 1-d arrays")
    if not np.isfinite(scores).all():
        raise ValueError("scores contain non-finite values")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != len(labels):
        raise ValueError("labels must be binary")
    if n_pos == 0 or n_neg == 0:
        if on_single_class == "nan":
            return float("nan")
        raise ValueError("roc auc needs at least one positive and one negative")

    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    ranks[order] = np.arange(1, len(scores) + 1)
    # average the ranks within each tie group
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    rank_sum_pos = float(ranks[labels == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def mean_auc(labels: np.ndarray, scores: np.ndarray, on_single_class: str = "nan"):
    """Unweighted mean of per-class AUCs; returns (mean, per-class list).

    Classes that cannot be scored contribute NaN and are excluded from the
    mean.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores)
    if labels.shape != scores.shape or labels.ndim != 2:
        raise ValueError("labels and scores must both be (N, K)")
    per_class = [
        roc_auc(labels[:, k], scores[:, k], on_single_class=on_single_class)
        for k in range(labels.shape[1])
    ]
    finite = [v for v in per_class if not np.isnan(v)]
    mean = float(np.mean(finite)) if finite else float("nan")
    return mean, per_class


def normalize_heatmap(heatmap: np.ndarray, out_hw: tuple[int, int] = (224, 224)) -> np.ndarray:
    """Bilinear-upsample a raw activation map, then min-max scale to uint8.

    A constant map carries no localization signal and comes back all zero.
    """
    arr = np.asarray(heatmap, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d heatmap, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("heatmap contains non-finite values")
    if arr.shape != out_hw:
        arr = cv2.resize(arr, out_hw[::-1], interpolation=cv2.INTER_LINEAR)
    lo = float(arr.min())
    hi = float(arr.max())
    if hi <= lo:
        return np.zeros(out_hw, dtype=np.uint8)
    scaled = (arr.astype(np.float64) - lo) / (hi - lo) * 255.0
    return np.rint(scaled).astype(np.uint8)


def heatmap_to_mask(heatmap_u8: np.ndarray, threshold: int = 127) -> np.ndarray:
    """Keep pixels strictly above the threshold."""
    return (np.asarray(heatmap_u8) > threshold).astype(np.uint8)


def extract_boxes(mask: np.ndarray) -> list[BBox]:
    """Tight boxes around the outer contours of the set regions.

    Uses border following on 8-connected components; holes do not produce
    boxes of their own.
    """
    mask = np.ascontiguousarray(np.asarray(mask, dtype=np.uint8))
    contours, hierarchy = cv2.findContours(
        mask, cv2.RETR_CCOMP, cv2.CHAIN_APPROX_NONE
    )
    boxes = []
    if hierarchy is None:
        return boxes
    for contour, info in zip(contours, hierarchy[0]):
        if info[3] != -1:  # inner contour (hole)
            continue
        xs = contour[:, 0, 0]
        ys = contour[:, 0, 1]
        boxes.append(
            BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
        )
    boxes.sort(key=lambda b: (b.y_min, b.x_min, b.y_max, b.x_max))
    return boxes


def map_bbox_to_crop(
    x: float, y: float, w: float, h: float, window
) -> BBox | None:
    """Carry a source-resolution box through a resize+crop window.

    Returns None when the box falls completely outside the crop.
    """
    src_h, src_w = window.source_hw
    res_h, res_w = window.resized_hw
    sx = res_w / src_w
    sy = res_h / src_h
    x0 = x * sx - window.left
    y0 = y * sy - window.top
    x1 = (x + w) * sx - window.left
    y1 = (y + h) * sy - window.top
    x0, x1 = max(0.0, x0), min(float(window.size), x1)
    y0, y1 = max(0.0, y0), min(float(window.size), y1)
    if x1 <= x0 or y1 <= y0:
        return None
    return BBox(x0, y0, x1, y1)


@dataclass
class LocalizationCase:
    """One scored (image, class) pair."""

    image_id: str
    class_id: int
    gt_boxes: list[BBox]
    pred_boxes: list[BBox]
    best_iou: float
    correct: bool


def score_case(gt_boxes: list[BBox], pred_boxes: list[BBox], threshold: float):
    """A positive case counts when any predicted box clears the threshold
    against any ground-truth box (strictly)."""
    best = 0.0
    for g in gt_boxes:
        for p in pred_boxes:
            best = max(best, iou(g, p))
    if gt_boxes:
        return best, best > threshold
    # negative case: correct only when nothing was predicted
    return best, len(pred_boxes) == 0


@dataclass
class LocalizationResult:
    threshold: float
    cases: list[LocalizationCase]
    accuracy: float
    per_class_accuracy: dict[int, float]


def localization_score(
    cases: list[tuple[str, int, list[BBox], list[BBox]]], threshold: float
) -> LocalizationResult:
    """Score (image_id, class_id, gt_boxes, pred_boxes) tuples at one
    IoU threshold."""
    scored = []
    for image_id, class_id, gt, pred in cases:
        best, correct = score_case(gt, pred, threshold)
        scored.append(
            LocalizationCase(
                image_id=image_id,
                class_id=class_id,
                gt_boxes=gt,
                pred_boxes=pred,
                best_iou=best,
                correct=correct,
            )
        )
    accuracy = float(np.mean([c.correct for c in scored])) if scored else float("nan")
    per_class: dict[int, float] = {}
    for k in sorted({c.class_id for c in scored}):
        sub = [c.correct for c in scored if c.class_id == k]
        per_class[k] = float(np.mean(sub))
    return LocalizationResult(
        threshold=threshold, cases=scored, accuracy=accuracy, per_class_accuracy=per_class
    )


@dataclass
class EvalReport:
    """Container for everything the eval command writes out."""

    class_names: list[str]
    mean_auc: float | None = None
    per_class_auc: list[float] | None = None
    localization: dict[str, dict] = field(default_factory=dict)
    n_images: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "n_images": self.n_images,
            "class_names": self.class_names,
        }
        if self.mean_auc is not None:
            payload["mean_auc"] = self.mean_auc
            payload["per_class_auc"] = {
                name: (None if np.isnan(v) else v)
                for name, v in zip(self.class_names, self.per_class_auc)
            }
        if self.localization:
            payload["localization"] = self.localization
        if self.extra:
            payload["extra"] = self.extra
        return json.dumps(payload, indent=2) + "\n"

    def to_text(self) -> str:
        lines = []
        width = max([len(n) for n in self.class_names] + [10])
        if self.per_class_auc is not None:
            lines.append(f"{'class':<{width}}  {'auc':>8}")
            lines.append("-" * (width + 10))
            for name, v in zip(self.class_names, self.per_class_auc):
                shown = "   --" if np.isnan(v) else f"{v:8.4f}"
                lines.append(f"{name:<{width}}  {shown:>8}")
            lines.append("-" * (width + 10))
            lines.append(f"{'mean':<{width}}  {self.mean_auc:8.4f}")
            lines.append("")
        if self.localization:
            thresholds = sorted(self.localization)
            header = f"{'class':<{width}}" + "".join(
                f"  T={t:>5}" for t in thresholds
            )
            lines.append(header)
            lines.append("-" * len(header))
            for k, name in enumerate(self.class_names):
                row = [f"{name:<{width}}"]
                any_value = False
                for t in thresholds:
                    acc = self.localization[t]["per_class_accuracy"].get(str(k))
                    if acc is None:
                        row.append(f"  {'--':>7}")
                    else:
                        row.append(f"  {acc:7.3f}")
                        any_value = True
                if any_value:
                    lines.append("".join(row))
            lines.append("-" * len(header))
            row = [f"{'overall':<{width}}"]
            for t in thresholds:
                row.append(f"  {self.localization[t]['accuracy']:7.3f}")
            lines.append("".join(row))
            lines.append("")
        return "\n".join(lines)

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(self.to_json())
        (out_dir / "report.txt").write_text(self.to_text())
