"""Disease-specific prior probability maps built from bbox annotations.

For each class, every annotated box is rasterized to a binary image on a
common canvas; the per-pixel sum over all annotations is then divided by
its maximum, giving a map in [0, 1] that concentrates where the disease
tends to occur. Classes without any annotation fall back to an all-ones
map, which reduces the attention branch to a no-op for that class.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import BBoxAnnotation

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


@dataclass
class PriorMap:
    """One class's normalized prior plus its provenance counts."""

    class_id: int
    map: np.ndarray  # float32 (H, W) in [0, 1]
    n_annotations: int
    raw: np.ndarray | None = None  # int64 accumulation, absent after load


@dataclass
class PriorMapSet:
    """All per-class priors at a shared resolution, in class-id order."""

    class_names: list[str]
    maps: list[PriorMap]
    resolution: tuple[int, int]

    def __post_init__(self):
        if len(self.class_names) != len(self.maps):
            raise ValueError("one prior map required per class")
        for k, pm in enumerate(self.maps):
            if pm.class_id != k:
                raise ValueError("prior maps must be given in class-id order")
            if pm.map.shape != self.resolution:
                raise ValueError(
                    f"map for class {self.class_names[k]!r} has shape {pm.map.shape}, "
                    f"expected {self.resolution}"
                )

    def stacked(self) -> np.ndarray:
        """(K, H, W) float32 view of the maps."""
        return np.stack([pm.map for pm in self.maps]).astype(np.float32)


def rasterize_bbox(resolution: tuple[int, int], x: float, y: float, w: float, h: float):
    """Binary image of a box: pixel (r, c) is set iff x <= c < x+w, y <= r < y+h.

    The box must lie inside the canvas.
    """
    height, width = resolution
    if w <= 0 or h <= 0:
        raise ValueError(f"bbox extent must be positive, got w={w}, h={h}")
    if x < 0 or y < 0 or x + w > width or y + h > height:
        raise ValueError(
            f"bbox ({x}, {y}, {w}, {h}) exceeds the {height}x{width} canvas"
        )
    cols = np.arange(width, dtype=np.float64)
    rows = np.arange(height, dtype=np.float64)
    in_x = (cols >= x) & (cols < x + w)
    in_y = (rows >= y) & (rows < y + h)
    return (in_y[:, None] & in_x[None, :]).astype(np.uint8)


def accumulate_class(
    annotations: list[BBoxAnnotation], class_id: int, resolution: tuple[int, int]
) -> tuple[np.ndarray, int]:
    """Sum of binary box images for one class; returns (raw int64 map, count)."""
    raw = np.zeros(resolution, dtype=np.int64)
    count = 0
    for ann in annotations:
        if ann.class_id != class_id or ann.flagged:
            continue
        raw += rasterize_bbox(resolution, ann.x, ann.y, ann.w, ann.h)
        count += 1
    return raw, count


def normalize_prior(raw: np.ndarray) -> np.ndarray:
    """Divide by the peak so the maximum becomes exactly 1.

    An all-zero accumulation (no annotations) yields an all-ones map.
    """
    peak = int(raw.max())
    if peak == 0:
        return np.ones(raw.shape, dtype=np.float32)
    return (raw.astype(np.float64) / peak).astype(np.float32)


def build_prior_maps(
    annotations: list[BBoxAnnotation],
    class_names: list[str],
    resolution: tuple[int, int],
) -> PriorMapSet:
    maps = []
    for k in range(len(class_names)):
        raw, count = accumulate_class(annotations, k, resolution)
        maps.append(
            PriorMap(class_id=k, map=normalize_prior(raw), n_annotations=count, raw=raw)
        )
    return PriorMapSet(class_names=list(class_names), maps=maps, resolution=resolution)


def _safe_name(class_name: str) -> str:
    return "".join(c if (c.isalnum() or c in "-_") else "_" for c in class_name)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_prior_maps(priors: PriorMapSet, out_dir) -> Path:
    """Write one 16-bit PNG per class plus a checksummed manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, pm in zip(priors.class_names, priors.maps):
        fname = f"{_safe_name(name)}.png"
        quantized = np.round(pm.map.astype(np.float64) * 65535.0).astype(np.uint16)
        Image.fromarray(quantized).save(out_dir / fname)
        entries.append(
            {
                "class": name,
                "file": fname,
                "n_annotations": pm.n_annotations,
                "sha256": _sha256(out_dir / fname),
            }
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "resolution": list(priors.resolution),
        "classes": entries,
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return out_dir


def load_prior_maps(in_dir) -> PriorMapSet:
    """Load a prior directory, verifying the manifest checksums."""
    in_dir = Path(in_dir)
    manifest_path = in_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"missing prior manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(
            f"prior format version {version!r} is not supported (expected {FORMAT_VERSION})"
        )
    resolution = tuple(int(v) for v in manifest["resolution"])
    class_names = []
    maps = []
    for k, entry in enumerate(manifest["classes"]):
        name = entry["class"]
        path = in_dir / entry["file"]
        if not path.is_file():
            raise FileNotFoundError(f"prior map for class {name!r} is missing: {path}")
        actual = _sha256(path)
        if actual != entry["sha256"]:
            raise ValueError(
                f"prior map for class {name!r} failed its checksum "
                f"(expected {entry['sha256'][:12]}…, got {actual[:12]}…)"
            )
        with Image.open(path) as im:
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        if arr.shape != resolution:
            raise ValueError(
                f"prior map for class {name!r} has shape {arr.shape}, "
                f"manifest says {resolution}"
            )
        class_names.append(name)
        maps.append(
            PriorMap(
                class_id=k,
                map=arr.astype(np.float32),
                n_annotations=int(entry["n_annotations"]),
            )
        )
    return PriorMapSet(class_names=class_names, maps=maps, resolution=resolution)
