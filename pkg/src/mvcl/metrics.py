"""Evaluation metrics and representation diagnostics.

Sentiment-style predictions are real scores; binary accuracy and F1
binarize them at zero (negative vs non-negative). Pearson correlation
returns ``None`` instead of NaN when either input is constant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .rng import RngState
from .tensor import DegenerateInputError


@dataclass
class MetricReport:
    acc2: float
    f1: float
    mae: float
    corr: float | None

    def to_json_line(self, **extra) -> str:
        payload = {"acc2": self.acc2, "f1": self.f1, "mae": self.mae, "corr": self.corr}
        payload.update(extra)
        return json.dumps(payload, sort_keys=True)


def _check_pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError("prediction and target lengths differ")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def _binary_f1(pred_pos: np.ndarray, target_pos: np.ndarray) -> float:
    tp = np.sum(pred_pos & target_pos)
    fp = np.sum(pred_pos & ~target_pos)
    fn = np.sum(~pred_pos & target_pos)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if precision + recall == 0.0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def acc2_f1(pred, target, *, exclude_zeros: bool = False,
            weighted: bool = False) -> tuple[float, float]:
    """Binary accuracy and F1 after sign-binarizing scores at zero.

    The non-negative class is positive. ``exclude_zeros`` drops samples
    whose target is exactly zero before binarizing; ``weighted`` averages
    the two per-class F1 scores by support instead of reporting the
    positive-class F1.
    """
    p, t = _check_pair(pred, target)
    if exclude_zeros:
        keep = t != 0.0
        if not keep.any():
            raise ValueError("no samples left after excluding zero targets")
        p, t = p[keep], t[keep]
    pred_pos = p >= 0.0
    target_pos = t >= 0.0
    acc = float(np.mean(pred_pos == target_pos))
    if weighted:
        pos_f1 = _binary_f1(pred_pos, target_pos)
        neg_f1 = _binary_f1(~pred_pos, ~target_pos)
        n_pos = int(np.sum(target_pos))
        n_neg = t.size - n_pos
        f1 = (pos_f1 * n_pos + neg_f1 * n_neg) / t.size
    else:
        f1 = _binary_f1(pred_pos, target_pos)
    return acc, float(f1)


def mae(pred, target) -> float:
    """Mean absolute error."""
    p, t = _check_pair(pred, target)
    return float(np.mean(np.abs(p - t)))


def pearson(pred, target) -> float | None:
    """Sample Pearson correlation, or None when either input is constant."""
    p, t = _check_pair(pred, target)
    if p.size < 2:
        raise ValueError("pearson needs at least 2 samples")
    pc = p - p.mean()
    tc = t - t.mean()
    denom = np.sqrt(np.sum(pc * pc) * np.sum(tc * tc))
    if denom == 0.0:
        return None
    return float(np.sum(pc * tc) / denom)


def linear_probe_accuracy(features, labels, rng: RngState,
                          train_frac: float = 0.7) -> float:
    """Held-out accuracy of a least-squares linear classifier.

    The probe is fit on a seeded random split of the rows and scored on the
    remainder; it measures how linearly separable the representation is.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("features must be [N, D] aligned with labels")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("probe needs at least 2 classes")
    n = x.shape[0]
    order = rng.generator().permutation(n)
    cut = max(1, min(n - 1, int(round(n * train_frac))))
    train, test = order[:cut], order[cut:]
    augmented = np.concatenate([x, np.ones((n, 1))], axis=1)
    one_hot = (y[train][:, None] == classes[None, :]).astype(np.float64)
    weights, *_ = np.linalg.lstsq(augmented[train], one_hot, rcond=None)
    predicted = classes[np.argmax(augmented[test] @ weights, axis=1)]
    return float(np.mean(predicted == y[test]))


@dataclass
class RepresentationDiagnostics:
    within_class_cosine: float
    between_class_cosine: float
    probe_accuracy: float

    @property
    def gap(self) -> float:
        return self.within_class_cosine - self.between_class_cosine


def representation_diagnostics(vectors, labels, rng: RngState) -> RepresentationDiagnostics:
    """Cosine clustering statistics plus a linear-probe accuracy."""
    x = np.asarray(vectors, dtype=np.float64)
    y = np.asarray(labels)
    if np.unique(y).size < 2:
        raise ValueError("diagnostics need at least 2 classes")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero-norm representation vector")
    normalized = x / norms
    cosine = normalized @ normalized.T
    upper_i, upper_j = np.triu_indices(x.shape[0], k=1)
    same = y[upper_i] == y[upper_j]
    if not same.any():
        raise ValueError("no within-class pairs available")
    within = float(np.mean(cosine[upper_i[same], upper_j[same]]))
    between = float(np.mean(cosine[upper_i[~same], upper_j[~same]]))
    probe = linear_probe_accuracy(x, y, rng.split("probe"))
    return RepresentationDiagnostics(within, between, probe)
