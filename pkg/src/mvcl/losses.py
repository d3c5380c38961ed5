"""Training objectives: supervised and paired-view contrastive losses,
the classifier head, and the classification/regression criteria.

All contrastive losses use cosine similarity divided by a temperature.
Log-sum-exp terms are stabilized by subtracting a detached row maximum, so
the values and gradients stay finite for any temperature the config allows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import numpy as np

from .nn import Module
from .rng import RngState
from .tensor import (
    DegenerateInputError,
    ShapeError,
    Tensor,
    add,
    div,
    exp,
    log,
    matmul,
    mul,
    neg,
    relu,
    reshape,
    sqrt,
    stack,
    sub,
    tensor_sum,
    transpose,
)

Reduction = Literal["mean", "sum"]


class BatchTooSmallError(Exception):
    """A contrastive batch has fewer samples than the loss can use."""


class DegenerateBatchError(Exception):
    """No anchor in the batch has any positive partner."""


@dataclass(frozen=True)
class ContrastiveConfig:
    """Temperature for the cosine-similarity contrastive losses."""

    temperature: float = 0.2

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def _as_matrix(z) -> Tensor:
    """Accept an [N, P] tensor or a sequence of length-P vectors."""
    if isinstance(z, Tensor):
        m = z
    else:
        items = list(z)
        if not items:
            raise ShapeError("empty embedding batch")
        m = stack(items, axis=0)
    if m.ndim != 2:
        raise ShapeError(f"expected an [N, P] embedding matrix, got shape {m.shape}")
    return m


def _normalize_rows(z: Tensor) -> Tensor:
    norms = sqrt(tensor_sum(mul(z, z), axis=1, keepdims=True))
    if np.any(norms.data == 0.0):
        raise DegenerateInputError("contrastive embedding with zero norm")
    return div(z, norms)


def _row_logsumexp(scaled: Tensor, keep_mask: np.ndarray) -> Tensor:
    """log sum over the masked entries of each row, max-shifted. [N] output."""
    shifted_max = np.max(np.where(keep_mask, scaled.data, -np.inf), axis=1, keepdims=True)
    e = mul(exp(sub(scaled, Tensor(shifted_max))), Tensor(keep_mask.astype(np.float64)))
    return add(log(tensor_sum(e, axis=1)), Tensor(shifted_max[:, 0]))


def supcon_loss(z, labels, cfg: ContrastiveConfig, reduction: Reduction = "mean") -> Tensor:
    """Supervised contrastive loss over one batch of embeddings.

    For each anchor, positives are the other batch members with the same
    label and the normalizer runs over every other batch member. Anchors
    without any positive contribute nothing; if no anchor has a positive
    the batch is rejected. ``reduction='sum'`` is the plain sum over
    contributing anchors, ``'mean'`` divides by their count.
    """
    z = _as_matrix(z)
    y = np.asarray(labels)
    n = z.shape[0]
    if y.shape != (n,):
        raise ShapeError("labels must be a flat list matching the batch size")
    if n < 2:
        raise BatchTooSmallError("supervised contrastive loss needs at least 2 samples")
    off_diagonal = ~np.eye(n, dtype=bool)
    positives = (y[:, None] == y[None, :]) & off_diagonal
    pos_counts = positives.sum(axis=1)
    contributing = pos_counts > 0
    if not contributing.any():
        raise DegenerateBatchError("every anchor lacks a positive partner")

    zn = _normalize_rows(z)
    scaled = mul(matmul(zn, transpose(zn)), 1.0 / cfg.temperature)
    log_denominator = _row_logsumexp(scaled, off_diagonal)  # [N]
    # mean log-probability of the positives, per anchor
    pos_mask = Tensor(positives.astype(np.float64))
    pos_logits = tensor_sum(mul(scaled, pos_mask), axis=1)
    divisor = Tensor(np.where(contributing, pos_counts, 1).astype(np.float64))
    per_anchor = div(sub(pos_logits, mul(log_denominator, Tensor(pos_counts.astype(np.float64)))), divisor)
    total = neg(tensor_sum(mul(per_anchor, Tensor(contributing.astype(np.float64)))))
    if reduction == "sum":
        return total
    if reduction == "mean":
        return div(total, float(contributing.sum()))
    raise ValueError(f"unknown reduction {reduction!r}")


def pairwise_sscl_loss(z, z_prime, cfg: ContrastiveConfig,
                       reduction: Reduction = "mean") -> Tensor:
    """Paired-view contrastive loss between two aligned embedding lists.

    Row i of each view is a positive pair. The normalizer for an anchor in
    one view is every member of the other view (the positive included) plus
    every *other* member of its own view. Both directions are summed; a
    singleton batch therefore scores exactly zero.
    """
    za = _as_matrix(z)
    zb = _as_matrix(z_prime)
    if za.shape != zb.shape:
        raise ShapeError(f"view shapes differ: {za.shape} vs {zb.shape}")
    n = za.shape[0]
    if n < 1:
        raise BatchTooSmallError("paired-view loss needs at least 1 sample")
    an = _normalize_rows(za)
    bn = _normalize_rows(zb)
    inv_t = 1.0 / cfg.temperature
    cross = mul(matmul(an, transpose(bn)), inv_t)  # sim(z_i, z'_k)
    within_a = mul(matmul(an, transpose(an)), inv_t)
    within_b = mul(matmul(bn, transpose(bn)), inv_t)
    eye = np.eye(n, dtype=np.float64)
    off_diagonal = ~np.eye(n, dtype=bool)

    def direction(cross_sim: Tensor, within: Tensor) -> Tensor:
        # denominator rows: all of the other view plus own-view without self
        keep = np.concatenate([np.ones((n, n), dtype=bool), off_diagonal], axis=1)
        log_denominator = _row_logsumexp(_hstack(cross_sim, within), keep)
        positive = tensor_sum(mul(cross_sim, Tensor(eye)), axis=1)
        return neg(tensor_sum(sub(positive, log_denominator)))

    total = add(direction(cross, within_a), direction(transpose(cross), within_b))
    if reduction == "sum":
        return total
    if reduction == "mean":
        return div(total, float(2 * n))
    raise ValueError(f"unknown reduction {reduction!r}")


def _hstack(a: Tensor, b: Tensor) -> Tensor:
    from .tensor import concat

    return concat([a, b], axis=1)


def sscl_total(pairs: Mapping[str, tuple], cfg: ContrastiveConfig,
               reduction: Reduction = "mean") -> Tensor:
    """Sum of the paired-view losses for the three target modalities."""
    if set(pairs) != {"t", "a", "v"}:
        raise ShapeError("expected view pairs for exactly 't', 'a' and 'v'")
    total = None
    for m in ("t", "a", "v"):
        z, z_prime = pairs[m]
        term = pairwise_sscl_loss(z, z_prime, cfg, reduction)
        total = term if total is None else add(total, term)
    return total


class ClassifierHead(Module):
    """Two-layer output head: linear, ReLU, linear; emits raw scores."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, rng: RngState):
        from .nn import xavier_normal

        gen = rng.generator()
        self.w_f = Tensor(xavier_normal(gen, in_dim, hidden_dim), requires_grad=True)
        self.b_f = Tensor(np.zeros(hidden_dim), requires_grad=True)
        self.w_o = Tensor(xavier_normal(gen, hidden_dim, out_dim), requires_grad=True)
        self.b_o = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, f: Tensor) -> Tensor:
        if f.ndim == 1:
            return reshape(self(reshape(f, (1, f.shape[0]))), (-1,))
        hidden = relu(add(matmul(f, self.w_f), self.b_f))
        return add(matmul(hidden, self.w_o), self.b_o)


def classifier_forward(head: ClassifierHead, f: Tensor) -> Tensor:
    """Raw scores for one representation [D] or a batch [N, D]."""
    return head(f)


def ce_loss(scores: Tensor, labels) -> Tensor:
    """Mean cross-entropy of raw scores against integer class labels."""
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ShapeError("scores must be [N, C] with C >= 2")
    n, c = scores.shape
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeError("labels must match the number of score rows")
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    shift = np.max(scores.data, axis=1, keepdims=True)
    shifted = sub(scores, Tensor(shift))
    log_norm = log(tensor_sum(exp(shifted), axis=1))
    one_hot = np.zeros((n, c))
    one_hot[np.arange(n), y] = 1.0
    picked = tensor_sum(mul(shifted, Tensor(one_hot)), axis=1)
    return div(tensor_sum(sub(log_norm, picked)), float(n))


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error; zero iff the predictions match exactly."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = sub(pred, target)
    return div(tensor_sum(mul(diff, diff)), float(max(pred.size, 1)))


def contrastive_classes(scores, granularity: float = 0.1) -> np.ndarray:
    """Map real-valued labels to contrastive class ids.

    Scores equal after rounding to the given granularity share a class, so
    regression datasets can drive the supervised contrastive stages.
    """
    if granularity <= 0:
        raise ValueError("granularity must be positive")
    arr = np.asarray(scores, dtype=np.float64)
    return np.round(arr / granularity).astype(np.int64)
