"""Overlap metrics on the padded canvas."""
from __future__ import annotations

import numpy as np

from ..render import AmodalTruth


def iou_box(a, b) -> float:
    """IoU of continuous boxes ``[x0, y0, x1, y1]``; two empty boxes score 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    area_a = max(a[2] - a[0], 0.0) * max(a[3] - a[1], 0.0)
    area_b = max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)
    iw = max(min(a[2], b[2]) - max(a[0], b[0]), 0.0)
    ih = max(min(a[3], b[3]) - max(a[1], b[1]), 0.0)
    inter = iw * ih
    union = area_a + area_b - inter
    if union <= 0:
        return 1.0
    return float(inter / union)


def iou_mask(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def occluded_region(truth: AmodalTruth, pad: int) -> np.ndarray:
    visible = np.zeros_like(truth.amodal_mask)
    visible[pad:pad + truth.visible_mask.shape[0], pad:pad + truth.visible_mask.shape[1]] = truth.visible_mask
    return truth.amodal_mask & ~visible


def amask_occ_iou(pred: np.ndarray, truth: AmodalTruth, pad: int) -> float | None:
    """Mask IoU inside the occluded region; None when nothing is occluded."""
    occ = occluded_region(truth, pad)
    if not occ.any():
        return None
    return iou_mask(np.asarray(pred, bool) & occ, truth.amodal_mask & occ)
