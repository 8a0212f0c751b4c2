"""Confusion matrices and mean IoU."""
from __future__ import annotations

import numpy as np

from ..errors import UndefinedMetricError
from ..tensorcore import IGNORE_LABEL


def confusion_matrix(pred, target, class_count, ignore_label=IGNORE_LABEL):
    """Rows are ground truth, columns prediction; ignored pixels are skipped."""
    pred = np.asarray(pred).ravel().astype(np.int64)
    target = np.asarray(target).ravel().astype(np.int64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction/target size mismatch {pred.size} vs {target.size}")
    keep = target != ignore_label
    t, p = target[keep], pred[keep]
    if t.size and (t.max() >= class_count or p.max() >= class_count or p.min() < 0):
        raise ValueError("labels outside class range")
    return np.bincount(t * class_count + p, minlength=class_count ** 2).reshape(class_count, class_count)


def miou(conf):
    """Per-class IoU (NaN where undefined) and their mean over defined classes."""
    conf = np.asarray(conf, dtype=np.float64)
    if conf.sum() == 0:
        raise UndefinedMetricError("mIoU of an empty confusion matrix is undefined")
    tp = np.diag(conf)
    denom = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    return iou, float(np.nanmean(iou))
