"""Qualitative overlays: heatmap blend plus predicted and ground-truth boxes.

Pure PIL/numpy so the output bytes are stable across environments. Predicted
boxes are drawn in red, ground truth in green; images whose requested class
has no activation above threshold come back as a captioned grayscale copy.
"""
from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .evaluation import BBox

PRED_COLOR = (255, 64, 64)
GT_COLOR = (64, 220, 64)


def _heat_lut() -> np.ndarray:
    """256-entry blue->cyan->yellow->red colormap."""
    lut = np.zeros((256, 3), dtype=np.float32)
    anchors = [
        (0, (0, 0, 128)),
        (64, (0, 128, 255)),
        (128, (0, 255, 128)),
        (192, (255, 255, 0)),
        (255, (255, 0, 0)),
    ]
    for (p0, c0), (p1, c1) in zip(anchors[:-1], anchors[1:]):
        span = p1 - p0
        for i in range(p0, p1 + 1):
            t = (i - p0) / span
            lut[i] = [c0[k] + t * (c1[k] - c0[k]) for k in range(3)]
    return lut


_LUT = _heat_lut()


def overlay_heatmap(image_u8: np.ndarray, heat_u8: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a uint8 heatmap onto a grayscale or RGB uint8 image."""
    if image_u8.ndim == 2:
        base = np.repeat(image_u8[:, :, None], 3, axis=2).astype(np.float32)
    else:
        base = image_u8.astype(np.float32)
    color = _LUT[heat_u8]
    # only tint where there is signal, so background stays readable
    weight = alpha * (heat_u8.astype(np.float32) / 255.0)[:, :, None]
    out = base * (1.0 - weight) + color * weight
    return np.clip(out, 0, 255).astype(np.uint8)


def draw_boxes(
    image: Image.Image,
    pred_boxes: list[BBox],
    gt_boxes: list[BBox],
    caption: str | None = None,
) -> Image.Image:
    draw = ImageDraw.Draw(image)
    for box in gt_boxes:
        draw.rectangle(
            [box.x_min, box.y_min, box.x_max - 1, box.y_max - 1], outline=GT_COLOR, width=3
        )
    for box in pred_boxes:
        draw.rectangle(
            [box.x_min, box.y_min, box.x_max - 1, box.y_max - 1], outline=PRED_COLOR, width=2
        )
    if caption:
        draw.rectangle([0, 0, image.width, 14], fill=(0, 0, 0))
        draw.text((3, 2), caption, fill=(255, 255, 255))
    return image


def render_case(
    crop_u8: np.ndarray,
    heat_u8: np.ndarray | None,
    pred_boxes: list[BBox],
    gt_boxes: list[BBox],
    caption: str,
) -> Image.Image:
    """One overlay panel; `heat_u8` of None means nothing was activated."""
    if heat_u8 is not None and heat_u8.any():
        blended = overlay_heatmap(crop_u8, heat_u8)
    else:
        blended = (
            np.repeat(crop_u8[:, :, None], 3, axis=2) if crop_u8.ndim == 2 else crop_u8.copy()
        )
        caption = caption + "  (no activation)"
    img = Image.fromarray(blended, mode="RGB")
    return draw_boxes(img, pred_boxes, gt_boxes, caption)
