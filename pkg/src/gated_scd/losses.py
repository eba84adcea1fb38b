"""Consistency losses, supervision terms and the composite objective.

The change label map used by the consistency terms holds +1 for unchanged
pixels, -1 for changed pixels and 0 for pixels that are ignored.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from gated_scd.decoder import ScdPrediction
from gated_scd.errors import DataError, EmptyReductionError, ParameterError, ShapeError
from gated_scd.models import IGNORE_INDEX, LossBreakdown, LossConfig, LossVariant
from gated_scd.tensor import SCALAR_SHAPE, Node, Op, stable_sigmoid, stable_softplus

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-12
UNCHANGED, CHANGED, IGNORED = 1, -1, 0
NO_CHANGE_CLASS = 0


@dataclass
class ScdLabels:
    """Ground truth for one batch: (n, H, W) maps."""

    sem_A: np.ndarray
    sem_B: np.ndarray
    change: np.ndarray

    def change_label(self, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
        """+1/-1/0 map of shape (n, 1, H, W) derived from the change mask."""
        y = np.where(self.change > 0, CHANGED, UNCHANGED)
        ignored = (self.sem_A == ignore_index) | (self.sem_B == ignore_index)
        y = np.where(ignored, IGNORED, y)
        return y[:, None, :, :].astype(np.int8)

    def semantic_targets(self, ignore_index: int = IGNORE_INDEX) -> tuple[np.ndarray, np.ndarray]:
        """Semantic maps with the no-change class folded into ignore.

        Unchanged pixels carry no land-cover label of their own, so the
        semantic branches are supervised on changed pixels only.
        """
        return tuple(
            np.where(sem == NO_CHANGE_CLASS, ignore_index, sem) for sem in (self.sem_A, self.sem_B)
        )


# =============================================================================
# Fused ops
# =============================================================================


class Cosine(Op):
    """Per-pixel cosine over channels, clamped to [-1, 1]."""

    kind = "cosine_map"

    def forward(self, x1, x2):
        if x1.shape != x2.shape:
            raise ShapeError(f"cosine_map: {x1.shape} vs {x2.shape}")
        dot = np.sum(x1 * x2, axis=1, keepdims=True)
        n1 = np.sqrt(np.sum(x1 * x1, axis=1, keepdims=True))
        n2 = np.sqrt(np.sum(x2 * x2, axis=1, keepdims=True))
        return np.clip(dot / np.maximum(n1 * n2, COSINE_EPS), -1.0, 1.0)

    def backward(self, grad, x1, x2):
        dot = np.sum(x1 * x2, axis=1, keepdims=True)
        n1 = np.sqrt(np.sum(x1 * x1, axis=1, keepdims=True))
        n2 = np.sqrt(np.sum(x2 * x2, axis=1, keepdims=True))
        prod = n1 * n2
        floored = prod < COSINE_EPS
        denom = np.where(floored, COSINE_EPS, prod)
        raw = dot / denom
        g = grad * ((raw > -1.0) & (raw < 1.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            shrink1 = np.where(floored, 0.0, raw / np.where(floored, 1.0, n1 * n1))
            shrink2 = np.where(floored, 0.0, raw / np.where(floored, 1.0, n2 * n2))
        d1 = g * (x2 / denom - shrink1 * x1)
        d2 = g * (x1 / denom - shrink2 * x2)
        return d1, d2


def _contributing(y: np.ndarray) -> int:
    count = int(np.count_nonzero(y != IGNORED))
    if count == 0:
        raise EmptyReductionError("no contributing pixels")
    return count


class Consistency(Op):
    """Mean over contributing pixels of the SC or SSC per-pixel term."""

    def __init__(self, y: np.ndarray, margin: float, variant: LossVariant, tau: float) -> None:
        if variant == LossVariant.SSC and tau <= 0:
            raise ParameterError(f"tau must be > 0, got {tau}")
        self.kind = f"{variant.value}_loss"
        self.y = y
        self.margin = margin
        self.variant = variant
        self.tau = tau
        self.count = _contributing(y)

    def forward(self, cos):
        if cos.shape != self.y.shape:
            raise ShapeError(f"labels {self.y.shape} do not match cosine map {cos.shape}")
        unchanged = (self.y == UNCHANGED) * (1.0 - cos)
        gap = cos - self.margin
        if self.variant == LossVariant.SSC:
            changed_term = self.tau * stable_softplus(gap / self.tau)
        else:
            changed_term = np.maximum(gap, 0.0)
        total = np.sum(unchanged) + np.sum((self.y == CHANGED) * changed_term)
        return np.full(SCALAR_SHAPE, total / self.count)

    def backward(self, grad, cos):
        return (grad.reshape(-1)[0] / self.count * self.pixel_grad(cos),)

    def pixel_grad(self, cos: np.ndarray) -> np.ndarray:
        """d(per-pixel term)/d(cos); zero on ignored pixels."""
        gap = cos - self.margin
        if self.variant == LossVariant.SSC:
            slope = stable_sigmoid(gap / self.tau)
        else:
            slope = (gap > 0).astype(np.float64)
        return np.where(self.y == UNCHANGED, -1.0, np.where(self.y == CHANGED, slope, 0.0))


class CrossEntropy(Op):
    kind = "semantic_ce"

    def __init__(self, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> None:
        self.labels = labels
        self.valid = labels != ignore_index
        self.count = int(np.count_nonzero(self.valid))
        if self.count == 0:
            raise EmptyReductionError("every pixel is ignored")
        self.safe = np.where(self.valid, labels, 0).astype(np.int64)

    def _log_softmax(self, logits):
        shifted = logits - logits.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def forward(self, logits):
        k = logits.shape[1]
        if self.labels.shape != (logits.shape[0],) + logits.shape[2:]:
            raise ShapeError(f"labels {self.labels.shape} do not match logits {logits.shape}")
        if np.any(self.safe >= k) or np.any(self.safe < 0):
            raise DataError(f"label outside 0..{k - 1} and not ignore")
        picked = np.take_along_axis(self._log_softmax(logits), self.safe[:, None], axis=1)
        return np.full(SCALAR_SHAPE, -np.sum(picked[:, 0] * self.valid) / self.count)

    def backward(self, grad, logits):
        probs = np.exp(self._log_softmax(logits))
        np.put_along_axis(
            probs, self.safe[:, None],
            np.take_along_axis(probs, self.safe[:, None], axis=1) - 1.0, axis=1,
        )
        scale = grad.reshape(-1)[0] / self.count
        return (probs * self.valid[:, None] * scale,)


class BinaryCrossEntropy(Op):
    kind = "change_bce"

    def __init__(self, target: np.ndarray) -> None:
        self.target = target.astype(np.float64)

    def forward(self, x):
        if x.shape != self.target.shape:
            raise ShapeError(f"target {self.target.shape} does not match logit {x.shape}")
        t = self.target
        loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
        return np.full(SCALAR_SHAPE, loss.mean())

    def backward(self, grad, x):
        return (grad.reshape(-1)[0] / x.size * (stable_sigmoid(x) - self.target),)


# =============================================================================
# Public losses
# =============================================================================


def cosine_map(x1: Node, x2: Node) -> Node:
    return x1.graph.apply(Cosine(), x1, x2)


def sc_loss(cos: Node, y: np.ndarray, m: float = 0.1) -> Node:
    return cos.graph.apply(Consistency(y, m, LossVariant.SC, 0.0), cos)


def ssc_loss(cos: Node, y: np.ndarray, m: float = 0.1, tau: float = 0.5) -> Node:
    return cos.graph.apply(Consistency(y, m, LossVariant.SSC, tau), cos)


def gradient_activation_ratio(cos: np.ndarray, y: np.ndarray, m: float = 0.1) -> float:
    """Share of changed pixels whose cosine is above the margin."""
    changed = y == CHANGED
    total = int(np.count_nonzero(changed))
    if total == 0:
        raise EmptyReductionError("no changed pixels")
    return int(np.count_nonzero(changed & (cos > m))) / total


def semantic_ce(logits: Node, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Node:
    return logits.graph.apply(CrossEntropy(labels, ignore_index), logits)


def change_bce(change_logit: Node, change_mask: np.ndarray) -> Node:
    target = change_mask.reshape(change_logit.shape)
    return change_logit.graph.apply(BinaryCrossEntropy(target), change_logit)


def _semantic_term(logits: Node, target: np.ndarray, ignore_index: int) -> Node:
    # a batch without changed pixels has nothing to classify
    if np.all(target == ignore_index):
        return logits.graph.constant(np.zeros(SCALAR_SHAPE))
    return semantic_ce(logits, target, ignore_index)


def total_loss(
    pred: ScdPrediction, labels: ScdLabels, cfg: LossConfig
) -> tuple[Node, LossBreakdown]:
    """ce_A + ce_B + change BCE + sc_weight · consistency, plus its breakdown.

    Cross-entropy runs over changed pixels only (see
    `ScdLabels.semantic_targets`); the change head alone decides where class
    0 applies. The consistency term compares the full-resolution semantic
    features of the two dates.
    """
    target_a, target_b = labels.semantic_targets(cfg.ignore_index)
    ce_a = _semantic_term(pred.sem_logits_A, target_a, cfg.ignore_index)
    ce_b = _semantic_term(pred.sem_logits_B, target_b, cfg.ignore_index)
    bce = change_bce(pred.change_logit, (labels.change > 0).astype(np.float64))
    total = ce_a + ce_b + bce

    y = labels.change_label(cfg.ignore_index)
    cos = cosine_map(pred.features_A, pred.features_B)
    ratio = 0.0
    if np.any(y == CHANGED):
        ratio = gradient_activation_ratio(cos.value, y, cfg.margin)

    sc_value = 0.0
    if cfg.variant != LossVariant.NONE:
        if cfg.variant == LossVariant.SSC:
            term = ssc_loss(cos, y, cfg.margin, cfg.tau)
        else:
            term = sc_loss(cos, y, cfg.margin)
        sc_value = term.item()
        total = total + term * cfg.sc_weight

    breakdown = LossBreakdown(
        total=total.item(),
        ce_A=ce_a.item(),
        ce_B=ce_b.item(),
        change_term=bce.item(),
        sc_term=sc_value,
        activation_ratio=ratio,
    )
    return total, breakdown
