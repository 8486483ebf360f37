"""Segmentation metrics: ARI, mean segmentation covering and slot-count MAE."""

from __future__ import annotations

from typing import Iterable

import numpy as np


class MetricError(ValueError):
    """A metric was asked for on an empty or degenerate pixel set."""


def predicted_labels(masks) -> np.ndarray:
    """Argmax over the slot axis of (..., K, H, W) masks; ties go to the lowest slot."""
    data = getattr(masks, "masks", masks)
    data = getattr(data, "data", data)
    return np.argmax(np.asarray(data), axis=-3)


def _flat_pair(pred, truth, foreground_only: bool, background: int, name: str):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise MetricError(f"{name}: shape mismatch {pred.shape} vs {truth.shape}")
    pred, truth = pred.ravel(), truth.ravel()
    if foreground_only:
        keep = truth != background
        pred, truth = pred[keep], truth[keep]
    if pred.size == 0:
        what = "foreground " if foreground_only else ""
        raise MetricError(f"{name}: no {what}pixels to score")
    return pred, truth


def contingency(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Counts n[i, j] of pixels with the i-th predicted and j-th true label."""
    _, p = np.unique(pred, return_inverse=True)
    _, t = np.unique(truth, return_inverse=True)
    n_t = t.max() + 1
    return np.bincount(p * n_t + t, minlength=(p.max() + 1) * n_t).reshape(-1, n_t)


def _comb2(n: np.ndarray) -> int:
    n = n.astype(np.int64)
    return int((n * (n - 1) // 2).sum())


def ari(pred, truth, foreground_only: bool = False, background: int = 0) -> float:
    """Adjusted Rand index; 1.0 when both labelings are trivially identical partitions."""
    pred, truth = _flat_pair(pred, truth, foreground_only, background, "ari")
    table = contingency(pred, truth)
    index = _comb2(table)
    a = _comb2(table.sum(axis=1))
    b = _comb2(table.sum(axis=0))
    pairs = pred.size * (pred.size - 1) // 2
    # integer numerator and denominator so that exact cases come out exact
    num = 2 * pairs * index - 2 * a * b
    den = pairs * (a + b) - 2 * a * b
    if den == 0:
        return 1.0
    return num / den


def msc(pred, truth, foreground_only: bool = False, background: int = 0,
        pixel_weighted: bool = False) -> float:
    """Mean over ground-truth segments of the best IOU with any predicted segment.

    With ``foreground_only`` only non-background ground-truth segments are
    scored; IOUs are still measured over the whole image.
    """
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise MetricError(f"msc: shape mismatch {pred.shape} vs {truth.shape}")
    labels = np.unique(truth)
    if foreground_only:
        labels = labels[labels != background]
    if labels.size == 0:
        raise MetricError("msc: no ground-truth segments to score")
    table = contingency(pred, truth)
    truth_ids = np.unique(truth)
    pred_sizes = table.sum(axis=1)
    scores, sizes = [], []
    for label in labels:
        col = table[:, np.searchsorted(truth_ids, label)]
        union = pred_sizes + col.sum() - col
        scores.append((col / union).max())
        sizes.append(col.sum())
    scores = np.asarray(scores)
    if pixel_weighted:
        sizes = np.asarray(sizes, dtype=np.float64)
        return float((scores * sizes).sum() / sizes.sum())
    return float(scores.mean())


def slot_count_mae(counts: Iterable[tuple[int, int]]) -> float:
    """Mean |used - ideal| over (used, ideal) pairs."""
    counts = list(counts)
    if not counts:
        raise MetricError("slot_count_mae: empty list")
    return float(np.mean([abs(u - i) for u, i in counts]))


def ideal_slot_count(truth, background: int = 0) -> int:
    """Foreground object count plus one background slot."""
    labels = np.unique(np.asarray(truth))
    return int((labels != background).sum()) + 1
