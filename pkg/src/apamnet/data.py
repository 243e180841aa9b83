"""Dataset ingestion and the shared image/mask preprocessing pipeline.

Images, chest ROI masks, and per-disease prior maps must all go through the
same resize/crop geometry so that they stay spatially aligned; the crop
window used for an image is returned explicitly and re-applied to its masks.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

NIH_CLASSES = [
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural_Thickening",
    "Hernia",
    "No Finding",
]

# the subset of NIH classes that come with bounding-box annotations
NIH_LOCALIZATION_CLASSES = NIH_CLASSES[:8]

SPLITS = ("train", "val", "test")


@dataclass
class ImageRecord:
    """One image with its multi-hot label vector."""

    image_id: str
    path: Path
    labels: np.ndarray  # shape (K,), values in {0, 1}
    split: str = "train"
    patient_id: str | None = None


@dataclass
class BBoxAnnotation:
    """Ground-truth lesion box in source-resolution pixel coordinates."""

    image_id: str
    class_id: int
    x: float
    y: float
    w: float
    h: float
    flagged: bool = False  # class is outside the localization subset

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(
                f"bbox for {self.image_id!r} has non-positive extent w={self.w}, h={self.h}"
            )
        if self.x < 0 or self.y < 0:
            raise ValueError(f"bbox for {self.image_id!r} has negative origin ({self.x}, {self.y})")


@dataclass
class PreprocessSpec:
    """Resize/crop/normalize parameters applied to every image."""

    resize_edge: int = 256
    crop_edge: int = 224
    crop_mode: str = "center"  # "center" or "random"
    channel_mean: tuple[float, float, float] = IMAGENET_MEAN
    channel_std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if self.crop_edge > self.resize_edge:
            raise ValueError("crop_edge must not exceed resize_edge")
        if self.crop_mode not in ("center", "random"):
            raise ValueError(f"unknown crop_mode {self.crop_mode!r}")
        if any(s <= 0 for s in self.channel_std):
            raise ValueError("channel_std components must be positive")


@dataclass(frozen=True)
class CropWindow:
    """Geometry of one resize+crop, reusable on aligned masks and maps."""

    source_hw: tuple[int, int]
    resized_hw: tuple[int, int]
    top: int
    left: int
    size: int


def load_label_index(csv_path, class_names) -> list[ImageRecord]:
    """Parse a label CSV with columns `Image Index` and `Finding Labels`.

    Finding labels are `|`-separated class names; an empty field means no
    findings. An optional `Patient ID` column is carried along for
    patient-disjoint splitting.
    """
    csv_path = Path(csv_path)
    class_to_id = {name: i for i, name in enumerate(class_names)}
    records = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for required in ("Image Index", "Finding Labels"):
            if required not in cols:
                raise ValueError(f"{csv_path}: missing required column {required!r}")
        has_patient = "Patient ID" in cols
        for row_no, row in enumerate(reader, start=2):
            image_id = row["Image Index"].strip()
            labels = np.zeros(len(class_names), dtype=np.uint8)
            raw = (row["Finding Labels"] or "").strip()
            if raw:
                for token in raw.split("|"):
                    token = token.strip()
                    if token not in class_to_id:
                        raise ValueError(
                            f"{csv_path} row {row_no} ({image_id}): unknown class {token!r}"
                        )
                    labels[class_to_id[token]] = 1
            records.append(
                ImageRecord(
                    image_id=image_id,
                    path=Path(image_id),
                    labels=labels,
                    patient_id=row["Patient ID"].strip() if has_patient else None,
                )
            )
    return records


def load_bbox_index(
    csv_path,
    class_names,
    image_sizes: dict[str, tuple[int, int]] | None = None,
    localization_classes: list[str] | None = None,
) -> list[BBoxAnnotation]:
    """Parse a bbox CSV: image id, class name, then x, y, w, h columns.

    Annotations for classes outside `localization_classes` are kept but
    flagged so that scoring can skip them. When `image_sizes` maps ids to
    (H, W), boxes are checked against the image bounds.
    """
    csv_path = Path(csv_path)
    class_to_id = {name: i for i, name in enumerate(class_names)}
    if localization_classes is None:
        localization_classes = [c for c in class_names if c in NIH_LOCALIZATION_CLASSES]
        if not localization_classes:
            localization_classes = list(class_names)
    loc_set = set(localization_classes)

    annotations = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return annotations
        header = [h.strip() for h in header]
        try:
            idx_image = header.index("Image Index")
            idx_label = header.index("Finding Label")
        except ValueError as exc:
            raise ValueError(f"{csv_path}: missing 'Image Index'/'Finding Label' columns") from exc
        if len(header) < idx_label + 5:
            raise ValueError(f"{csv_path}: expected four numeric bbox columns after the label")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            image_id = row[idx_image].strip()
            name = row[idx_label].strip()
            if name not in class_to_id:
                raise ValueError(f"{csv_path} row {row_no} ({image_id}): unknown class {name!r}")
            try:
                x, y, w, h = (float(row[idx_label + 1 + k]) for k in range(4))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{csv_path} row {row_no} ({image_id}): bad bbox values") from exc
            ann = BBoxAnnotation(
                image_id=image_id,
                class_id=class_to_id[name],
                x=x,
                y=y,
                w=w,
                h=h,
                flagged=name not in loc_set,
            )
            if image_sizes is not None and image_id in image_sizes:
                src_h, src_w = image_sizes[image_id]
                if ann.x + ann.w > src_w or ann.y + ann.h > src_h:
                    raise ValueError(
                        f"{csv_path} row {row_no} ({image_id}): bbox exceeds image "
                        f"bounds ({src_h}x{src_w})"
                    )
            annotations.append(ann)
    return annotations


def read_image_native(path) -> np.ndarray:
    """Decode a raster file keeping its native dtype (uint8/uint16/float32).

    Returns HxW for grayscale sources and HxWx3 for color ones. Keeping the
    dtype makes the result cheap to cache; `_as_float01` scales it lazily.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L"):
                arr = np.asarray(im, dtype=np.uint16)
            elif mode == "I":
                arr = np.clip(np.asarray(im, dtype=np.int32), 0, 65535).astype(np.uint16)
            elif mode == "L":
                arr = np.asarray(im, dtype=np.uint8)
            elif mode == "F":
                arr = np.clip(np.asarray(im, dtype=np.float32), 0.0, 1.0)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read image file: {path}") from exc
    return arr


def read_image(path) -> np.ndarray:
    """Decode an 8/16-bit raster file to a float array in [0, 1]."""
    return _as_float01(read_image_native(path))


def _as_float01(image) -> np.ndarray:
    if isinstance(image, (str, Path)):
        return _as_float01(read_image_native(image))
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float32) / 65535.0
    return np.clip(arr.astype(np.float32), 0.0, 1.0)


def _resize(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    h, w = arr.shape[:2]
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return arr
    interp = cv2.INTER_AREA if (oh <= h and ow <= w) else cv2.INTER_LINEAR
    return cv2.resize(arr, (ow, oh), interpolation=interp)


def preprocess_image(image, spec: PreprocessSpec, rng: np.random.Generator | None = None):
    """Resize, crop, and normalize one image.

    `image` may be a file path or an array (HxW or HxWx3, uint8/uint16/float
    in [0, 1]). Grayscale inputs are replicated to 3 channels. Returns the
    normalized CHW float32 tensor plus the CropWindow that was applied, so
    masks and prior maps can be cropped identically.
    """
    arr = _as_float01(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    elif arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected HxW or HxWx3 image, got shape {arr.shape}")
    src_h, src_w = arr.shape[:2]

    scale = spec.resize_edge / min(src_h, src_w)
    if src_h <= src_w:
        resized_hw = (spec.resize_edge, max(spec.resize_edge, int(round(src_w * scale))))
    else:
        resized_hw = (max(spec.resize_edge, int(round(src_h * scale))), spec.resize_edge)
    arr = _resize(arr, resized_hw)

    size = spec.crop_edge
    max_top = resized_hw[0] - size
    max_left = resized_hw[1] - size
    if spec.crop_mode == "center":
        top, left = max_top // 2, max_left // 2
    else:
        if rng is None:
            raise ValueError("random crop requires an rng")
        top = int(rng.integers(0, max_top + 1))
        left = int(rng.integers(0, max_left + 1))
    crop = arr[top : top + size, left : left + size]

    mean = np.asarray(spec.channel_mean, dtype=np.float32)
    std = np.asarray(spec.channel_std, dtype=np.float32)
    out = (crop - mean) / std
    out = np.ascontiguousarray(out.transpose(2, 0, 1), dtype=np.float32)
    window = CropWindow(
        source_hw=(src_h, src_w), resized_hw=resized_hw, top=top, left=left, size=size
    )
    return out, window


def transform_aligned(mask_or_map, window: CropWindow, target_hw: tuple[int, int]) -> np.ndarray:
    """Apply an image's crop geometry to a mask/map, then pool to feature size.

    The spatial map must be at the window's source resolution. Downsampling
    uses area averaging so fractional coverage is preserved; output values
    stay within [0, 1] and the result has shape (1, target_h, target_w).
    """
    arr = np.asarray(mask_or_map, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d map, got shape {arr.shape}")
    if arr.shape != window.source_hw:
        raise ValueError(
            f"map resolution {arr.shape} does not match the crop window's "
            f"source resolution {window.source_hw}"
        )
    arr = _resize(arr, window.resized_hw)
    crop = arr[window.top : window.top + window.size, window.left : window.left + window.size]
    th, tw = target_hw
    if crop.shape[0] % th == 0 and crop.shape[1] % tw == 0:
        bh, bw = crop.shape[0] // th, crop.shape[1] // tw
        pooled = crop.reshape(th, bh, tw, bw).mean(axis=(1, 3))
    else:
        pooled = cv2.resize(crop, (tw, th), interpolation=cv2.INTER_AREA)
    pooled = np.clip(pooled, 0.0, 1.0).astype(np.float32)
    return pooled[None, :, :]


def assign_splits(
    records: list[ImageRecord],
    fractions=(0.7, 0.1, 0.2),
    seed: int = 0,
    strategy: str = "auto",
) -> list[ImageRecord]:
    """Assign train/val/test splits in place and return the records.

    With strategy "auto", splitting is patient-disjoint whenever patient ids
    are present, otherwise by image. Fractions apply to the shuffled units.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three values summing to 1")
    if strategy not in ("auto", "image", "patient"):
        raise ValueError(f"unknown split strategy {strategy!r}")
    use_patients = strategy == "patient" or (
        strategy == "auto" and any(r.patient_id for r in records)
    )
    if use_patients and not all(r.patient_id for r in records):
        raise ValueError("patient-disjoint split requires a patient id on every record")

    rng = np.random.default_rng(seed)
    if use_patients:
        units = sorted({r.patient_id for r in records})
    else:
        units = [r.image_id for r in records]
    units = list(units)
    rng.shuffle(units)
    n = len(units)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    split_of = {}
    for i, u in enumerate(units):
        split_of[u] = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
    for r in records:
        r.split = split_of[r.patient_id if use_patients else r.image_id]
    return records


@dataclass
class LoadedDataset:
    """A dataset directory resolved into records, annotations, and metadata."""

    root: Path
    class_names: list[str]
    records: list[ImageRecord]
    bboxes: list[BBoxAnnotation] = field(default_factory=list)
    canvas_hw: tuple[int, int] | None = None

    @property
    def image_dir(self) -> Path:
        return self.root / "images"

    def split_records(self, split: str) -> list[ImageRecord]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def bboxes_by_image(self) -> dict[str, list[BBoxAnnotation]]:
        out: dict[str, list[BBoxAnnotation]] = {}
        for ann in self.bboxes:
            out.setdefault(ann.image_id, []).append(ann)
        return out


def load_dataset(
    root,
    split_seed: int = 0,
    split_fractions=(0.7, 0.1, 0.2),
    split_strategy: str = "auto",
    holdout_bbox_images: bool = False,
) -> LoadedDataset:
    """Load a dataset directory.

    Expected layout: classes.txt, labels.csv, images/, plus optional
    bboxes.csv, splits.csv, and meta.json ({"canvas": [H, W]}). When
    splits.csv is absent, splits are generated from `split_seed`. With
    `holdout_bbox_images`, images that carry bbox annotations are forced
    into the test split so they never leak into training.
    """
    root = Path(root)
    classes_file = root / "classes.txt"
    labels_file = root / "labels.csv"
    if not classes_file.is_file():
        raise FileNotFoundError(f"missing {classes_file}")
    if not labels_file.is_file():
        raise FileNotFoundError(f"missing {labels_file}")
    class_names = [ln.strip() for ln in classes_file.read_text().splitlines() if ln.strip()]
    records = load_label_index(labels_file, class_names)
    image_dir = root / "images"
    for r in records:
        r.path = image_dir / r.image_id

    splits_file = root / "splits.csv"
    if splits_file.is_file():
        split_of = {}
        with open(splits_file, newline="") as fh:
            for row in csv.DictReader(fh):
                split_of[row["Image Index"].strip()] = row["split"].strip()
        for r in records:
            if r.image_id not in split_of:
                raise ValueError(f"{splits_file}: no split for image {r.image_id!r}")
            if split_of[r.image_id] not in SPLITS:
                raise ValueError(f"{splits_file}: bad split {split_of[r.image_id]!r}")
            r.split = split_of[r.image_id]
    else:
        assign_splits(records, split_fractions, seed=split_seed, strategy=split_strategy)

    bbox_file = root / "bboxes.csv"
    bboxes = load_bbox_index(bbox_file, class_names) if bbox_file.is_file() else []
    if holdout_bbox_images and bboxes:
        annotated = {a.image_id for a in bboxes}
        for r in records:
            if r.image_id in annotated:
                r.split = "test"

    canvas_hw = None
    meta_file = root / "meta.json"
    if meta_file.is_file():
        meta = json.loads(meta_file.read_text())
        if "canvas" in meta:
            canvas_hw = (int(meta["canvas"][0]), int(meta["canvas"][1]))

    return LoadedDataset(
        root=root,
        class_names=class_names,
        records=records,
        bboxes=bboxes,
        canvas_hw=canvas_hw,
    )
