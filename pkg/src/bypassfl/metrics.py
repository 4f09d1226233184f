"""Accuracy, macro-F1, Dice and confusion matrices."""

from __future__ import annotations

import numpy as np

from .errors import DomainError, StructuralError


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise StructuralError("label and prediction arrays differ in length")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= n_classes):
        raise DomainError(f"class indices must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _check_cm(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise StructuralError(f"confusion matrix must be square, got shape {list(cm.shape)}")
    if np.any(cm < 0):
        raise DomainError("confusion matrix has negative counts")
    if cm.sum() <= 0:
        raise DomainError("confusion matrix is empty")
    return cm


def accuracy(cm) -> float:
    cm = _check_cm(cm)
    return float(np.trace(cm) / cm.sum())


def per_class_f1(cm) -> np.ndarray:
    """F1 per class; a class with no true positives scores 0."""
    cm = _check_cm(cm).astype(np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2TP + FP + FN
    out = np.zeros_like(tp)
    np.divide(2.0 * tp, denom, out=out, where=tp > 0)
    return out


def macro_f1(cm) -> float:
    return float(per_class_f1(cm).mean())


def dice_score(pred_mask, true_mask) -> float:
    """2|A n B| / (|A| + |B|); two empty masks agree perfectly."""
    p = np.asarray(pred_mask)
    t = np.asarray(true_mask)
    if p.shape != t.shape:
        raise StructuralError(f"mask shapes differ: {list(p.shape)} vs {list(t.shape)}")
    for m in (p, t):
        if not np.all((m == 0) | (m == 1)):
            raise DomainError("dice_score masks must be binary")
    total = p.sum() + t.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.sum(p * t) / total)
