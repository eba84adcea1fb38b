"""Streaming confusion matrix and the semantic change detection metrics.

Index 0 of every label map means "no change"; 1..K are semantic classes and
255 marks ignored pixels. Each pixel contributes one tally per date.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from gated_scd.errors import DataError, EmptyReductionError, ShapeError
from gated_scd.models import IGNORE_INDEX, MetricReport

logger = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    """(K+1)x(K+1) counts, rows ground truth, columns prediction."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> ConfusionMatrix:
        """Zero matrix over no-change plus `num_classes` semantic classes."""
        return cls(np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0] - 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class ScdCounts:
    """Streaming tallies behind P_scd / R_scd / F_scd."""

    correct: int = 0
    pred_changed: int = 0
    gt_changed: int = 0

    def merge(self, other: ScdCounts) -> ScdCounts:
        return ScdCounts(
            self.correct + other.correct,
            self.pred_changed + other.pred_changed,
            self.gt_changed + other.gt_changed,
        )


def _valid_pixels(num_classes: int, *maps: np.ndarray) -> np.ndarray:
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise ShapeError(f"label maps disagree: {m.shape} vs {shape}")
    valid = np.ones(shape, dtype=bool)
    for m in maps:
        m = np.asarray(m)
        bad = (m != IGNORE_INDEX) & ((m < 0) | (m > num_classes))
        if np.any(bad):
            raise DataError(f"label {int(m[bad][0])} outside 0..{num_classes} and not ignore")
        valid &= m != IGNORE_INDEX
    return valid


def accumulate(
    cm: ConfusionMatrix,
    gt_A: np.ndarray,
    gt_B: np.ndarray,
    pred_A: np.ndarray,
    pred_B: np.ndarray,
) -> ConfusionMatrix:
    """New matrix with both dates of one map quadruple tallied in."""
    k1 = cm.num_classes + 1
    valid = _valid_pixels(cm.num_classes, gt_A, gt_B, pred_A, pred_B)
    counts = cm.counts.copy()
    for gt, pred in ((gt_A, pred_A), (gt_B, pred_B)):
        flat = k1 * gt[valid].astype(np.int64) + pred[valid].astype(np.int64)
        counts += np.bincount(flat, minlength=k1 * k1).reshape(k1, k1)
    return ConfusionMatrix(counts)


def merge(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    if a.counts.shape != b.counts.shape:
        raise ShapeError(f"cannot merge {a.counts.shape} with {b.counts.shape}")
    return ConfusionMatrix(a.counts + b.counts)


def _require_total(cm: ConfusionMatrix) -> int:
    total = cm.total
    if total == 0:
        raise EmptyReductionError("confusion matrix is empty")
    return total


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def compute_oa(cm: ConfusionMatrix) -> float:
    return int(np.trace(cm.counts)) / _require_total(cm)


def binary_ious(cm: ConfusionMatrix) -> tuple[float, float]:
    """(IoU_unchanged, IoU_changed) of the change / no-change collapse."""
    _require_total(cm)
    c = cm.counts
    tn = int(c[0, 0])
    fp = int(c[0, 1:].sum())
    fn = int(c[1:, 0].sum())
    tp = int(c[1:, 1:].sum())
    return _ratio(tn, tn + fp + fn), _ratio(tp, tp + fp + fn)


def compute_miou(cm: ConfusionMatrix) -> float:
    iou_u, iou_c = binary_ious(cm)
    return (iou_u + iou_c) / 2.0


def compute_kappa(cm: ConfusionMatrix) -> float:
    """Cohen's kappa with the no-change/no-change cell zeroed."""
    _require_total(cm)
    q = cm.counts.astype(np.float64).copy()
    q[0, 0] = 0.0
    total = q.sum()
    if total == 0:
        return 0.0
    po = np.trace(q) / total
    pe = float(np.sum(q.sum(axis=1) * q.sum(axis=0))) / (total * total)
    if pe == 1.0:
        return 0.0
    return float((po - pe) / (1.0 - pe))


def compute_sek(cm: ConfusionMatrix) -> float:
    _, iou_c = binary_ious(cm)
    q = cm.counts.copy()
    q[0, 0] = 0
    if q.sum() == 0:
        return 0.0
    return compute_kappa(cm) * math.exp(iou_c - 1.0)


def count_scd(
    gt_A: np.ndarray,
    gt_B: np.ndarray,
    pred_A: np.ndarray,
    pred_B: np.ndarray,
    num_classes: int,
    counts: ScdCounts | None = None,
) -> ScdCounts:
    """Fold one map quadruple into the F_scd tallies."""
    counts = counts or ScdCounts()
    valid = _valid_pixels(num_classes, gt_A, gt_B, pred_A, pred_B)
    correct = pred_changed = gt_changed = 0
    for gt, pred in ((gt_A, pred_A), (gt_B, pred_B)):
        g = gt[valid]
        p = pred[valid]
        pred_changed += int(np.count_nonzero(p != 0))
        gt_changed += int(np.count_nonzero(g != 0))
        correct += int(np.count_nonzero((g != 0) & (p == g)))
    return counts.merge(ScdCounts(correct, pred_changed, gt_changed))


def compute_f_scd(counts: ScdCounts) -> tuple[float, float, float]:
    """(F_scd, P_scd, R_scd); every 0/0 resolves to 0."""
    p = _ratio(counts.correct, counts.pred_changed)
    r = _ratio(counts.correct, counts.gt_changed)
    return _ratio(2 * p * r, p + r), p, r


def metric_report(cm: ConfusionMatrix, counts: ScdCounts) -> MetricReport:
    iou_u, iou_c = binary_ious(cm)
    f, p, r = compute_f_scd(counts)
    report = MetricReport(
        oa=compute_oa(cm),
        f_scd=f,
        miou=(iou_u + iou_c) / 2.0,
        sek=compute_sek(cm),
        p_scd=p,
        r_scd=r,
        iou_changed=iou_c,
        iou_unchanged=iou_u,
        kappa=compute_kappa(cm),
    )
    logger.debug("metrics over %d tallies: %s", cm.total, report.csv_row())
    return report


class ScdEvaluator:
    """Accumulates a stream of map quadruples; one per worker, merged at the end."""

    def __init__(self, num_classes: int) -> None:
        self.num_classes = num_classes
        self.cm = ConfusionMatrix.empty(num_classes)
        self.counts = ScdCounts()

    def add(self, gt_A, gt_B, pred_A, pred_B) -> None:
        self.cm = accumulate(self.cm, gt_A, gt_B, pred_A, pred_B)
        self.counts = count_scd(gt_A, gt_B, pred_A, pred_B, self.num_classes, self.counts)

    def merge(self, other: ScdEvaluator) -> ScdEvaluator:
        merged = ScdEvaluator(self.num_classes)
        merged.cm = merge(self.cm, other.cm)
        merged.counts = self.counts.merge(other.counts)
        return merged

    def report(self) -> MetricReport:
        return metric_report(self.cm, self.counts)
