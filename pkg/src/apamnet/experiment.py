"""Glue between datasets, priors, ROI masks, and the model.

A SampleBank owns the preprocessing for one dataset: it decodes and caches
images, applies each image's crop window to its ROI mask and to the shared
prior maps, and assembles numpy batches the model can consume. Evaluation
helpers turn model outputs into the classification/localization report.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import (
    CropWindow,
    LoadedDataset,
    PreprocessSpec,
    _as_float01,
    preprocess_image,
    read_image,
    read_image_native,
    transform_aligned,
)
from .evaluation import (
    EvalReport,
    extract_boxes,
    heatmap_to_mask,
    localization_score,
    map_bbox_to_crop,
    mean_auc,
    normalize_heatmap,
)
from .model import ApamClassifier, ModelConfig
from .priors import PriorMapSet
from .roi import OtsuLungSegmenter, RoiParams, generate_roi_mask


@dataclass
class Batch:
    """Numpy batch plus the crop windows used to build it."""

    images: np.ndarray  # (B, 3, 224, 224) float32
    labels: np.ndarray  # (B, K) uint8
    windows: list[CropWindow]
    roi: np.ndarray | None = None  # (B, 1, h, w) float32
    priors: np.ndarray | None = None  # (B, K, h, w) float32

    def model_args(self):
        args = [torch.from_numpy(self.images)]
        args.append(torch.from_numpy(self.roi) if self.roi is not None else None)
        args.append(torch.from_numpy(self.priors) if self.priors is not None else None)
        return args

    def labels_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.labels.astype(np.float32))


class SampleBank:
    """Preprocessing front end for one dataset/model pairing.

    ROI masks come from `roi_source`: a directory of precomputed masks,
    "fallback" for the built-in Otsu segmenter, or None when the attention
    mode does not use them. Decoded images (native dtype) and full-resolution
    ROI masks are cached per image; prior transforms are cached per crop
    window, which collapses to a handful of entries for center-crop eval.
    """

    def __init__(
        self,
        dataset: LoadedDataset,
        model_config: ModelConfig,
        priors: PriorMapSet | None = None,
        roi_source: str | Path | None = None,
        spec: PreprocessSpec | None = None,
        roi_params: RoiParams | None = None,
        cache_images: bool = True,
    ):
        self.dataset = dataset
        self.config = model_config
        self.spec = spec or PreprocessSpec()
        self.feature_hw = model_config.feature_hw
        self.roi_params = roi_params or RoiParams()
        self.cache_images = cache_images

        if model_config.n_classes != len(dataset.class_names):
            raise ValueError(
                f"model expects {model_config.n_classes} classes, dataset has "
                f"{len(dataset.class_names)}"
            )
        if model_config.needs_priors:
            if priors is None:
                raise ValueError("this attention mode requires prior maps")
            if priors.class_names != dataset.class_names:
                raise ValueError(
                    "prior map classes do not match the dataset classes: "
                    f"{priors.class_names} vs {dataset.class_names}"
                )
        self.priors = priors

        self.roi_dir: Path | None = None
        self.segmenter = None
        if model_config.needs_roi:
            if roi_source is None:
                raise ValueError(
                    "this attention mode requires roi masks; pass a mask "
                    'directory or "fallback"'
                )
            if roi_source == "fallback":
                self.segmenter = OtsuLungSegmenter()
            else:
                self.roi_dir = Path(roi_source)
                if not self.roi_dir.is_dir():
                    raise FileNotFoundError(f"roi mask directory not found: {self.roi_dir}")

        self._image_cache: dict[str, np.ndarray] = {}
        self._roi_cache: dict[str, np.ndarray] = {}
        self._prior_window_cache: dict[CropWindow, np.ndarray] = {}

    def split_records(self, split: str):
        return self.dataset.split_records(split)

    def _source_image(self, record) -> np.ndarray:
        """Decoded image in its native dtype (uint8 stays uint8)."""
        if record.image_id in self._image_cache:
            return self._image_cache[record.image_id]
        arr = read_image_native(record.path)
        if self.cache_images:
            self._image_cache[record.image_id] = arr
        return arr

    def _source_roi(self, record, image: np.ndarray) -> np.ndarray:
        """Full-resolution {0, 1} uint8 mask for one image."""
        if record.image_id in self._roi_cache:
            return self._roi_cache[record.image_id]
        if self.roi_dir is not None:
            path = self.roi_dir / f"{Path(record.image_id).stem}.png"
            if not path.is_file():
                raise FileNotFoundError(f"no roi mask for image {record.image_id!r}: {path}")
            mask = (read_image(path) >= 0.5).astype(np.uint8)
            if mask.ndim == 3:
                mask = mask[:, :, 0]
        else:
            mask = generate_roi_mask(
                _as_float01(image), self.segmenter, self.roi_params, image_id=record.image_id
            ).mask
        if self.cache_images:
            self._roi_cache[record.image_id] = mask
        return mask

    def _prior_stack(self, window: CropWindow, cache: bool) -> np.ndarray:
        """(K, h, w) priors carried through one crop window.

        Priors live on the dataset canvas; when the canvas differs from an
        image's own resolution they are first rendered onto that image's
        frame by plain resize. Center-crop windows repeat across images of
        the same resolution, so those transforms are cached.
        """
        if window in self._prior_window_cache:
            return self._prior_window_cache[window]
        maps = self.priors.stacked()
        out = np.empty((maps.shape[0], *self.feature_hw), dtype=np.float32)
        for k in range(maps.shape[0]):
            pm = maps[k]
            if pm.shape != window.source_hw:
                import cv2

                pm = cv2.resize(
                    pm, window.source_hw[::-1], interpolation=cv2.INTER_LINEAR
                )
            out[k] = transform_aligned(pm, window, self.feature_hw)[0]
        if cache and len(self._prior_window_cache) < 64:
            self._prior_window_cache[window] = out
        return out

    def sample(self, record, train: bool, rng: np.random.Generator | None = None):
        """(image_chw, window, roi_1hw | None, priors_khw | None) for one record."""
        arr = self._source_image(record)
        spec = self.spec
        if train:
            spec = PreprocessSpec(
                resize_edge=spec.resize_edge,
                crop_edge=spec.crop_edge,
                crop_mode="random",
                channel_mean=spec.channel_mean,
                channel_std=spec.channel_std,
            )
        chw, window = preprocess_image(arr, spec, rng=rng)

        roi = None
        if self.config.needs_roi:
            roi = transform_aligned(self._source_roi(record, arr), window, self.feature_hw)
        priors = None
        if self.config.needs_priors:
            priors = self._prior_stack(window, cache=not train)
        return chw, window, roi, priors

    def batch(self, records, train: bool, rng: np.random.Generator | None = None) -> Batch:
        if train and rng is None:
            raise ValueError("training batches need an rng for the random crops")
        images = []
        windows = []
        rois = [] if self.config.needs_roi else None
        priors = [] if self.config.needs_priors else None
        labels = np.stack([r.labels for r in records])
        for record in records:
            chw, window, roi, prior = self.sample(record, train=train, rng=rng)
            images.append(chw)
            windows.append(window)
            if rois is not None:
                rois.append(roi)
            if priors is not None:
                priors.append(prior)
        return Batch(
            images=np.stack(images),
            labels=labels,
            windows=windows,
            roi=np.stack(rois) if rois is not None else None,
            priors=np.stack(priors) if priors is not None else None,
        )


@torch.no_grad()
def evaluate_classification(model: ApamClassifier, bank: SampleBank, records, batch_size=16):
    """(mean_auc, per_class_auc, scores, labels) on center crops."""
    model.eval()
    scores = []
    labels = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        batch = bank.batch(chunk, train=False)
        out = model(*batch.model_args())
        scores.append(torch.sigmoid(out.logits).cpu().numpy())
        labels.append(batch.labels)
    scores = np.concatenate(scores)
    labels = np.concatenate(labels)
    mean, per_class = mean_auc(labels, scores, on_single_class="nan")
    return mean, per_class, scores, labels


@torch.no_grad()
def evaluate_localization(
    model: ApamClassifier,
    bank: SampleBank,
    records,
    thresholds=(0.1, 0.3),
    batch_size: int = 16,
    include_negatives: bool = False,
    cam_threshold: int = 127,
):
    """Score CAM-derived boxes against ground truth at each IoU threshold.

    Cases are (image, class) pairs that carry at least one non-flagged
    ground-truth box; with `include_negatives`, annotated images also
    contribute their box-free positive labels as negative cases.
    """
    model.eval()
    by_image = bank.dataset.bboxes_by_image()
    annotated = [r for r in records if r.image_id in by_image]
    raw_cases = []
    for start in range(0, len(annotated), batch_size):
        chunk = annotated[start : start + batch_size]
        batch = bank.batch(chunk, train=False)
        out = model(*batch.model_args())
        cams = out.cams.cpu().numpy()
        for i, record in enumerate(chunk):
            window = batch.windows[i]
            anns = [a for a in by_image[record.image_id] if not a.flagged]
            class_ids = sorted({a.class_id for a in anns})
            if include_negatives:
                labeled = set(np.flatnonzero(record.labels))
                class_ids = sorted(set(class_ids) | labeled)
            for k in class_ids:
                gt = []
                for a in anns:
                    if a.class_id != k:
                        continue
                    mapped = map_bbox_to_crop(a.x, a.y, a.w, a.h, window)
                    if mapped is not None:
                        gt.append(mapped)
                heat = normalize_heatmap(cams[i, k], (window.size, window.size))
                pred = extract_boxes(heatmap_to_mask(heat, cam_threshold))
                if not gt and not include_negatives:
                    continue  # every box fell outside the crop
                raw_cases.append((record.image_id, k, gt, pred))
    return {t: localization_score(raw_cases, t) for t in thresholds}


def build_eval_report(
    model: ApamClassifier,
    bank: SampleBank,
    records,
    mode: str = "cls",
    thresholds=(0.1, 0.3),
    batch_size: int = 16,
    include_negatives: bool = False,
) -> EvalReport:
    report = EvalReport(class_names=list(bank.dataset.class_names), n_images=len(records))
    if mode in ("cls", "both"):
        mean, per_class, _, _ = evaluate_classification(model, bank, records, batch_size)
        report.mean_auc = mean
        report.per_class_auc = per_class
    if mode in ("loc", "both"):
        results = evaluate_localization(
            model,
            bank,
            records,
            thresholds=thresholds,
            batch_size=batch_size,
            include_negatives=include_negatives,
        )
        for t, res in results.items():
            report.localization[str(t)] = {
                "accuracy": res.accuracy,
                "n_cases": len(res.cases),
                "per_class_accuracy": {str(k): v for k, v in res.per_class_accuracy.items()},
            }
    return report
