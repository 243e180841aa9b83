"""Independent reference implementations used only by the tests.

Everything here is deliberately written with a different algorithm than the
code under test: flood fill instead of labeled morphology, gift wrapping
instead of monotone chain, exhaustive pair counting instead of rank sums,
per-pixel loops instead of vectorized rasterization, and plain nested loops
instead of torch modules. Slow is fine; independent is the point.
"""
from __future__ import annotations

from collections import deque
from fractions import Fraction

import numpy as np


# ---------------------------------------------------------------- components
def flood_fill_components(mask: np.ndarray) -> list[set]:
    """8-connected components of the set pixels, via BFS; returns pixel sets."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    seen = np.zeros_like(mask)
    comps = []
    for r0 in range(h):
        for c0 in range(w):
            if not mask[r0, c0] or seen[r0, c0]:
                continue
            comp = set()
            queue = deque([(r0, c0)])
            seen[r0, c0] = True
            while queue:
                r, c = queue.popleft()
                comp.add((r, c))
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                            seen[rr, cc] = True
                            queue.append((rr, cc))
            comps.append(comp)
    return comps


def component_boxes(mask: np.ndarray) -> list[tuple[int, int, int, int]]:
    """(x_min, y_min, x_max, y_max) per component, [min, max) convention,
    sorted the same way extract_boxes sorts."""
    boxes = []
    for comp in flood_fill_components(mask):
        rows = [p[0] for p in comp]
        cols = [p[1] for p in comp]
        boxes.append((min(cols), min(rows), max(cols) + 1, max(rows) + 1))
    boxes.sort(key=lambda b: (b[1], b[0], b[3], b[2]))
    return boxes


# ----------------------------------------------------------------- hull
def jarvis_hull(points: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Gift-wrapping convex hull of integer (x, y) points."""
    pts = sorted(set(map(tuple, points)))
    if len(pts) <= 2:
        return pts
    hull = []
    start = min(pts)  # lowest x, then lowest y
    current = start
    while True:
        hull.append(current)
        candidate = pts[0] if pts[0] != current else pts[1]
        for p in pts:
            if p == current:
                continue
            cross = (candidate[0] - current[0]) * (p[1] - current[1]) - (
                candidate[1] - current[1]
            ) * (p[0] - current[0])
            if cross < 0:
                candidate = p
            elif cross == 0:
                # collinear: take the farther point
                d_cand = (candidate[0] - current[0]) ** 2 + (candidate[1] - current[1]) ** 2
                d_p = (p[0] - current[0]) ** 2 + (p[1] - current[1]) ** 2
                if d_p > d_cand:
                    candidate = p
        current = candidate
        if current == start:
            break
    return hull


def point_in_hull(px: int, py: int, hull: list[tuple[int, int]]) -> bool:
    """Is the point inside or on the hull polygon (vertices in order)?"""
    n = len(hull)
    if n == 1:
        return (px, py) == hull[0]
    if n == 2:
        (ax, ay), (bx, by) = hull
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        if cross != 0:
            return False
        dot = (px - ax) * (bx - ax) + (py - ay) * (by - ay)
        return 0 <= dot <= (bx - ax) ** 2 + (by - ay) ** 2
    sign = 0
    for i in range(n):
        ax, ay = hull[i]
        bx, by = hull[(i + 1) % n]
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        if cross != 0:
            if sign == 0:
                sign = 1 if cross > 0 else -1
            elif (cross > 0) != (sign > 0):
                return False
    return True


def hull_fill_reference(mask: np.ndarray) -> np.ndarray:
    """Per-pixel point-in-hull test over the whole grid."""
    mask = np.asarray(mask).astype(bool)
    ys, xs = np.nonzero(mask)
    out = np.zeros(mask.shape, dtype=np.uint8)
    if len(ys) == 0:
        return out
    hull = jarvis_hull(list(zip(xs.tolist(), ys.tolist())))
    for r in range(mask.shape[0]):
        for c in range(mask.shape[1]):
            if point_in_hull(c, r, hull):
                out[r, c] = 1
    return out


# ----------------------------------------------------------------- iou
def iou_by_pixel_enumeration(box_a, box_b, scale: int) -> Fraction:
    """Exact IoU of two boxes whose coordinates are multiples of 1/scale.

    Boxes are (x_min, y_min, x_max, y_max) Fractions; the area is counted in
    1/scale-sized cells so the result is an exact rational.
    """

    def cells(box):
        x0, y0, x1, y1 = (Fraction(v) * scale for v in box)
        assert all(v.denominator == 1 for v in (x0, y0, x1, y1))
        return {
            (x, y)
            for x in range(int(x0), int(x1))
            for y in range(int(y0), int(y1))
        }

    a, b = cells(box_a), cells(box_b)
    union = len(a | b)
    if union == 0:
        return Fraction(0)
    return Fraction(len(a & b), union)


# ----------------------------------------------------------------- auc
def auc_by_pair_counting(labels, scores) -> float:
    """P(pos > neg) + 0.5 * P(pos == neg) over all positive/negative pairs."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


# ----------------------------------------------------------------- priors
def prior_map_reference(boxes, resolution):
    """Count boxes covering each pixel with loops, then divide by the peak.

    `boxes` is a list of (x, y, w, h); returns (normalized float64, raw int).
    """
    h, w = resolution
    raw = np.zeros((h, w), dtype=np.int64)
    for (x, y, bw, bh) in boxes:
        for r in range(h):
            for c in range(w):
                if x <= c < x + bw and y <= r < y + bh:
                    raw[r, c] += 1
    peak = raw.max()
    if peak == 0:
        return np.ones((h, w), dtype=np.float64), raw
    return raw.astype(np.float64) / peak, raw


# ----------------------------------------------------------------- attention
def apam_reference(module, features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Nested-loop recomputation of an eval-mode APAM forward pass.

    Reads the conv/batch-norm parameters (including running stats) straight
    off the module and redoes every step with scalar loops in float64.
    """

    def conv_block(vec, block):
        wgt = block.conv.weight.detach().numpy().astype(np.float64)
        bias = block.conv.bias.detach().numpy().astype(np.float64)
        out_ch = wgt.shape[0]
        out = np.zeros(out_ch, dtype=np.float64)
        for o in range(out_ch):
            acc = bias[o]
            for i in range(wgt.shape[1]):
                acc += wgt[o, i, 0, 0] * vec[i]
            out[o] = acc
        mean = block.bn.running_mean.detach().numpy().astype(np.float64)
        var = block.bn.running_var.detach().numpy().astype(np.float64)
        gamma = block.bn.weight.detach().numpy().astype(np.float64)
        beta = block.bn.bias.detach().numpy().astype(np.float64)
        eps = block.bn.eps
        for o in range(out_ch):
            out[o] = (out[o] - mean[o]) / np.sqrt(var[o] + eps) * gamma[o] + beta[o]
        if block.activation == "leaky_relu":
            for o in range(out_ch):
                if out[o] < 0:
                    out[o] *= 0.2
        else:
            for o in range(out_ch):
                out[o] = 1.0 / (1.0 + np.exp(-out[o]))
        return out

    features = features.astype(np.float64)
    mask = mask.astype(np.float64)
    b, c, h, w = features.shape
    out = np.zeros_like(features)
    for n in range(b):
        masked = np.zeros((c, h, w))
        for ch in range(c):
            for r in range(h):
                for col in range(w):
                    masked[ch, r, col] = features[n, ch, r, col] * mask[n, 0, r, col]
        f_avg = np.array([features[n, ch].mean() for ch in range(c)])
        f_max = np.array([features[n, ch].max() for ch in range(c)])
        m_avg = np.array([masked[ch].mean() for ch in range(c)])
        m_max = np.array([masked[ch].max() for ch in range(c)])
        summed = (
            conv_block(f_avg, module.branch_avg)
            + conv_block(f_max, module.branch_max)
            + conv_block(m_avg, module.branch_masked_avg)
            + conv_block(m_max, module.branch_masked_max)
        )
        weight = conv_block(summed, module.fuse)
        for ch in range(c):
            for r in range(h):
                for col in range(w):
                    out[n, ch, r, col] = (
                        weight[ch] * features[n, ch, r, col]
                        + (1.0 - weight[ch]) * masked[ch, r, col]
                    )
    return out


# ----------------------------------------------------------------- gradients
def finite_difference_grad(fn, params: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    grad = np.zeros_like(params, dtype=np.float64)
    for i in range(len(params)):
        bumped = params.copy()
        bumped[i] += step
        hi = fn(bumped)
        bumped[i] -= 2 * step
        lo = fn(bumped)
        grad[i] = (hi - lo) / (2 * step)
    return grad
