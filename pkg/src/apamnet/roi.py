"""Chest ROI masks from lung segmentation output.

A raw (possibly soft) segmentation is binarized, reduced to its two largest
8-connected islands (the lungs), closed into a single chest region by a
filled convex hull, then padded with a disc dilation so the mediastinum and
costophrenic angles stay inside. Any segmenter can be plugged in; a simple
Otsu dark-region fallback keeps the pipeline runnable without one.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .data import read_image

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class RoiParams:
    """Knobs of the mask post-processing chain."""

    threshold: float = 0.5
    keep_islands: int = 2
    dilation_radius: int = 8
    working_edge: int = 256


@dataclass
class RoiMask:
    """Final binary mask plus where it came from."""

    mask: np.ndarray  # uint8 (H, W) in {0, 1}
    provenance: str  # "segmenter", "fallback", or "external"


def binarize(prob_map: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold a soft map: value >= threshold becomes 1."""
    arr = np.asarray(prob_map, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d map, got shape {arr.shape}")
    return (arr >= threshold).astype(np.uint8)


def keep_largest_islands(mask: np.ndarray, k: int = 2) -> np.ndarray:
    """Keep the k largest 8-connected components.

    Ties on area break toward the smaller centroid (row, then column) so the
    result never depends on label order.
    """
    mask = np.asarray(mask).astype(bool)
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n <= k:
        return mask.astype(np.uint8)
    areas = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    centroids = ndimage.center_of_mass(mask, labels, index=np.arange(1, n + 1))
    order = sorted(
        range(1, n + 1),
        key=lambda lab: (-areas[lab - 1], centroids[lab - 1][0], centroids[lab - 1][1]),
    )
    keep = set(order[:k])
    return np.isin(labels, list(keep)).astype(np.uint8)


def _monotone_chain(points: np.ndarray) -> np.ndarray:
    """Convex hull vertices (counterclockwise in x-right/y-down coordinates).

    Points are integer (x, y) pairs; collinear boundary points are dropped.
    """
    pts = np.unique(points, axis=0)  # sorts lexicographically by (x, y)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.int64)


def convex_hull_fill(mask: np.ndarray) -> np.ndarray:
    """Fill the convex hull of the set pixels.

    A pixel belongs to the hull iff its center lies inside (or on) the hull
    of the set pixel centers, tested exactly with integer cross products.
    """
    mask = np.asarray(mask).astype(bool)
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return mask.astype(np.uint8)
    # only each row's extreme pixels can be hull vertices; this cuts the
    # candidate set from O(area) to O(height) without changing the hull
    rows = np.unique(ys)
    first = mask[rows].argmax(axis=1)
    last = mask.shape[1] - 1 - mask[rows, ::-1].argmax(axis=1)
    points = np.concatenate(
        [np.stack([first, rows], axis=1), np.stack([last, rows], axis=1)]
    ).astype(np.int64)
    hull = _monotone_chain(points)

    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.uint8)
    if len(hull) == 1:
        out[hull[0][1], hull[0][0]] = 1
        return out

    # nothing outside the point bounding box can be in the hull
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    gx, gy = np.meshgrid(
        np.arange(x0, x1, dtype=np.int64), np.arange(y0, y1, dtype=np.int64)
    )
    if len(hull) == 2:
        # degenerate hull: the integer points on the segment
        a, b = hull
        d = b - a
        cross = d[0] * (gy - a[1]) - d[1] * (gx - a[0])
        t = (gx - a[0]) * d[0] + (gy - a[1]) * d[1]
        inside = (cross == 0) & (t >= 0) & (t <= d[0] ** 2 + d[1] ** 2)
    else:
        inside = np.ones(gx.shape, dtype=bool)
        for i in range(len(hull)):
            a = hull[i]
            b = hull[(i + 1) % len(hull)]
            # hull is counterclockwise in image coordinates, so interior
            # points satisfy cross >= 0 for every edge
            inside &= (b[0] - a[0]) * (gy - a[1]) - (b[1] - a[1]) * (gx - a[0]) >= 0
    out[y0:y1, x0:x1] = inside
    return out


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a disc of the given pixel radius."""
    if radius < 0:
        raise ValueError("dilation radius must be >= 0")
    mask = np.asarray(mask).astype(bool)
    if radius == 0:
        return mask.astype(np.uint8)
    span = np.arange(-radius, radius + 1)
    disc = (span[:, None] ** 2 + span[None, :] ** 2) <= radius**2
    return ndimage.binary_dilation(mask, structure=disc).astype(np.uint8)


def refine_mask(raw: np.ndarray, params: RoiParams) -> np.ndarray:
    """binarize -> keep islands -> hull fill -> dilate."""
    mask = binarize(raw, params.threshold)
    mask = keep_largest_islands(mask, params.keep_islands)
    mask = convex_hull_fill(mask)
    return dilate(mask, params.dilation_radius)


class Segmenter:
    """Anything that maps an image in [0, 1] to a soft lung map in [0, 1]."""

    name = "segmenter"

    def segment(self, image: np.ndarray, image_id: str | None = None) -> np.ndarray:
        raise NotImplementedError


class OtsuLungSegmenter(Segmenter):
    """Crude stand-in: lungs are the dark regions under an Otsu threshold.

    Good enough to exercise the pipeline; swap in a trained model for real
    use.
    """

    name = "fallback"

    def segment(self, image: np.ndarray, image_id: str | None = None) -> np.ndarray:
        if image.ndim == 3:
            image = image.mean(axis=2)
        u8 = np.clip(image * 255.0, 0, 255).astype(np.uint8)
        _, dark = cv2.threshold(u8, 0, 255, cv2.THRESH_BINARY_INV + cv2.THRESH_OTSU)
        return (dark > 0).astype(np.float32)


class ExternalMapSegmenter(Segmenter):
    """Reads precomputed per-image maps from a directory, keyed by image id."""

    name = "external"

    def __init__(self, map_dir):
        self.map_dir = Path(map_dir)
        if not self.map_dir.is_dir():
            raise FileNotFoundError(f"segmentation map directory not found: {self.map_dir}")

    def segment(self, image: np.ndarray, image_id: str | None = None) -> np.ndarray:
        if image_id is None:
            raise ValueError("external segmentation maps require an image id")
        stem = Path(image_id).stem
        for candidate in (self.map_dir / image_id, self.map_dir / f"{stem}.png"):
            if candidate.is_file():
                arr = read_image(candidate)
                if arr.ndim == 3:
                    arr = arr.mean(axis=2)
                return arr.astype(np.float32)
        raise FileNotFoundError(f"no segmentation map for image {image_id!r} in {self.map_dir}")


def generate_roi_mask(
    image: np.ndarray,
    segmenter: Segmenter,
    params: RoiParams | None = None,
    image_id: str | None = None,
) -> RoiMask:
    """Segment one image (at the working resolution) and refine the result.

    The image is resized so its short edge matches `params.working_edge`
    before segmentation; the refined mask is resized back to the source
    resolution with nearest-neighbor so it stays binary.
    """
    params = params or RoiParams()
    if image.ndim == 3:
        image = image.mean(axis=2)
    src_h, src_w = image.shape
    edge = params.working_edge
    scale = edge / min(src_h, src_w)
    work_hw = (
        (edge, max(edge, int(round(src_w * scale))))
        if src_h <= src_w
        else (max(edge, int(round(src_h * scale))), edge)
    )
    if work_hw != (src_h, src_w):
        interp = cv2.INTER_AREA if work_hw[0] <= src_h else cv2.INTER_LINEAR
        work = cv2.resize(image.astype(np.float32), work_hw[::-1], interpolation=interp)
    else:
        work = image.astype(np.float32)

    soft = segmenter.segment(work, image_id=image_id)
    if soft.shape != work.shape:
        raise ValueError(
            f"segmenter returned shape {soft.shape}, expected {work.shape}"
        )
    refined = refine_mask(soft, params)
    if refined.shape != (src_h, src_w):
        refined = cv2.resize(
            refined, (src_w, src_h), interpolation=cv2.INTER_NEAREST
        )
    provenance = segmenter.name if segmenter.name in ("fallback", "external") else "segmenter"
    return RoiMask(mask=refined.astype(np.uint8), provenance=provenance)
