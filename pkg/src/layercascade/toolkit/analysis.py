"""Pixel difficulty partitions, boundary statistics and per-stage class tallies."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..tensorcore import IGNORE_LABEL

DIFFICULTY_THRESHOLD = 0.95


@dataclass
class DifficultyPartition:
    es: np.ndarray
    ms: np.ndarray
    hs: np.ndarray
    evaluated: np.ndarray
    threshold: float = DIFFICULTY_THRESHOLD

    def fractions(self):
        n = max(int(self.evaluated.sum()), 1)
        return {"es": self.es.sum() / n, "ms": self.ms.sum() / n, "hs": self.hs.sum() / n}


def difficulty_partition(probs, labels, threshold=DIFFICULTY_THRESHOLD, ignore_label=IGNORE_LABEL):
    """Easy: confidently right. Hard: confidently wrong. Moderate: the rest.

    "Confidently" is a strict ``max prob > threshold``.
    """
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    evaluated = labels != ignore_label
    confident = conf > threshold
    correct = pred == labels
    es = evaluated & confident & correct
    hs = evaluated & confident & ~correct
    ms = evaluated & ~confident
    return DifficultyPartition(es, ms, hs, evaluated, threshold)


def label_edges(labels, ignore_label=IGNORE_LABEL):
    """Pixels with a differently labelled 4-neighbour, plus ignore pixels.

    Works on ``(h, w)`` or ``(n, h, w)``; neighbours never cross images.
    """
    labels = np.asarray(labels)
    edges = labels == ignore_label
    for axis in (-1, -2):
        a = np.swapaxes(labels, axis, -1)
        diff = a[..., 1:] != a[..., :-1]
        e = np.zeros(a.shape, dtype=bool)
        e[..., 1:] |= diff
        e[..., :-1] |= diff
        edges |= np.swapaxes(e, axis, -1)
    return edges


def near_boundary(labels, radius=2, ignore_label=IGNORE_LABEL):
    edges = label_edges(labels, ignore_label)
    size = (1,) * (edges.ndim - 2) + (2 * radius + 1, 2 * radius + 1)
    return ndimage.maximum_filter(edges, size=size, mode="constant", cval=False)


def boundary_fraction(mask, labels, radius=2, ignore_label=IGNORE_LABEL):
    """Fraction of ``mask`` within Chebyshev distance ``radius`` of a label change."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        warnings.warn("boundary_fraction of an empty mask; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float((near_boundary(labels, radius, ignore_label) & mask).sum() / count)


@dataclass
class StageStats:
    exited: np.ndarray  # (class_count, stages) pixels labelled by each stage
    processed: np.ndarray  # (class_count, stages) pixels that reached each stage
    ratios: np.ndarray  # (class_count, stages - 1) processed[k+1] / processed[k], NaN if undefined


def stage_stats(exit_masks, labels, class_count, ignore_label=IGNORE_LABEL):
    labels = np.asarray(labels)
    valid = labels != ignore_label
    s = len(exit_masks)
    exited = np.zeros((class_count, s), dtype=np.int64)
    for k, m in enumerate(exit_masks):
        sel = np.asarray(m, dtype=bool) & valid
        exited[:, k] = np.bincount(labels[sel].astype(np.int64), minlength=class_count)[:class_count]
    # a pixel reaches stage k iff it exits at stage k or later
    processed = np.cumsum(exited[:, ::-1], axis=1)[:, ::-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        ratios = np.where(processed[:, :-1] > 0, processed[:, 1:] / np.maximum(processed[:, :-1], 1), np.nan)
    return StageStats(exited, processed, ratios)
