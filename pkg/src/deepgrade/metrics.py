"""Classification metrics: confusion matrices, (balanced) accuracy, sensitivity, AUC."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError


def confusion_matrix(y_true, y_pred, n_classes):
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _check(cm):
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or (cm < 0).any():
        raise ValidationError("confusion matrix must be square and non-negative")
    return cm


def acc(cm):
    cm = _check(cm)
    total = cm.sum()
    if total == 0:
        raise ValidationError("empty confusion matrix")
    return float(np.trace(cm) / total)


def sensitivity(cm):
    """Per-class recall; every true class needs at least one sample."""
    cm = _check(cm)
    rows = cm.sum(axis=1)
    if (rows == 0).any():
        raise ValidationError(f"true class {int(np.flatnonzero(rows == 0)[0])} has no samples")
    return np.diag(cm) / rows


def bacc(cm):
    return float(np.mean(sensitivity(cm)))


def present_class_bacc(y_true, y_pred, n_classes):
    """Balanced accuracy over the classes that occur in ``y_true`` (model selection on small splits)."""
    cm = confusion_matrix(y_true, y_pred, n_classes)
    rows = cm.sum(axis=1) > 0
    return float(np.mean(np.diag(cm)[rows] / cm.sum(axis=1)[rows]))


def argmax_predict(probs):
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=1)


def auc_binary(scores, labels):
    """Mann-Whitney AUC with ties counted as one half; ``labels`` are 0/1 or bool."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)  # average ranks give ties half credit
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_macro_ovr(probs, labels):
    """Unweighted mean of one-vs-rest AUCs, scoring each class by its own probability."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[1] == 2:
        return auc_binary(probs[:, 1], labels == 1)
    return float(np.mean([auc_binary(probs[:, c], labels == c) for c in range(probs.shape[1])]))
