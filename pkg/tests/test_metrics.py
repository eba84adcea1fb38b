import math

import numpy as np
import pytest

from gated_scd.errors import DataError, EmptyReductionError, ShapeError
from gated_scd.metrics import (
    ConfusionMatrix,
    ScdCounts,
    ScdEvaluator,
    accumulate,
    binary_ious,
    compute_f_scd,
    compute_kappa,
    compute_miou,
    compute_oa,
    compute_sek,
    count_scd,
    merge,
    metric_report,
)

K = 4


def _random_maps(rng, size=16, ignore_rate=0.1):
    maps = []
    for _ in range(4):
        m = rng.integers(0, K + 1, size=(size, size))
        m[rng.uniform(size=m.shape) < ignore_rate] = 255
        maps.append(m)
    return maps


def _changed_scene(rng, size=8):
    """Consistent scene: unchanged pixels are 0 in both dates."""
    change = rng.uniform(size=(size, size)) < 0.4
    change[0, 0] = change[0, 1] = True
    sem_a = np.where(change, rng.integers(1, K + 1, size=change.shape), 0)
    sem_b = np.where(change, rng.integers(1, K + 1, size=change.shape), 0)
    sem_a[0, 0], sem_a[0, 1] = 1, 2
    return sem_a, sem_b


class TestAccumulate:
    def test_perfect_prediction_diagonal(self, rng):
        gt_a, gt_b = _changed_scene(rng, size=4)
        cm = accumulate(ConfusionMatrix.empty(K), gt_a, gt_b, gt_a, gt_b)
        assert np.trace(cm.counts) == 32
        assert cm.total == 32

    def test_all_ignored_leaves_matrix(self, rng):
        start = accumulate(ConfusionMatrix.empty(K), *_random_maps(rng))
        ignored = np.full((16, 16), 255)
        pred = rng.integers(0, K + 1, size=(16, 16))
        after = accumulate(start, ignored, ignored, pred, pred)
        np.testing.assert_array_equal(after.counts, start.counts)

    def test_matches_brute_force(self, rng):
        gt_a, gt_b, pred_a, pred_b = _random_maps(rng)
        cm = accumulate(ConfusionMatrix.empty(K), gt_a, gt_b, pred_a, pred_b)
        expected = np.zeros((K + 1, K + 1), dtype=np.int64)
        for i in range(16):
            for j in range(16):
                cells = (gt_a[i, j], gt_b[i, j], pred_a[i, j], pred_b[i, j])
                if 255 in cells:
                    continue
                expected[gt_a[i, j], pred_a[i, j]] += 1
                expected[gt_b[i, j], pred_b[i, j]] += 1
        np.testing.assert_array_equal(cm.counts, expected)

    def test_out_of_range_label(self):
        bad = np.array([[K + 1]])
        with pytest.raises(DataError):
            accumulate(ConfusionMatrix.empty(K), bad, bad, bad, bad)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            accumulate(ConfusionMatrix.empty(K), np.zeros((2, 2), int), np.zeros((2, 2), int),
                       np.zeros((3, 2), int), np.zeros((2, 2), int))


class TestMerge:
    def test_identity_and_commutativity(self, rng):
        a = accumulate(ConfusionMatrix.empty(K), *_random_maps(rng))
        b = accumulate(ConfusionMatrix.empty(K), *_random_maps(rng))
        np.testing.assert_array_equal(merge(a, ConfusionMatrix.empty(K)).counts, a.counts)
        np.testing.assert_array_equal(merge(a, b).counts, merge(b, a).counts)
        assert merge(a, b).total == a.total + b.total

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            merge(ConfusionMatrix.empty(K), ConfusionMatrix.empty(K + 1))

    def test_split_stream_equals_single(self, rng):
        stream = [_random_maps(rng, size=8) for _ in range(100)]
        single = ScdEvaluator(K)
        first, second = ScdEvaluator(K), ScdEvaluator(K)
        for i, maps in enumerate(stream):
            single.add(*maps)
            (first if i < 50 else second).add(*maps)
        merged = first.merge(second)
        np.testing.assert_array_equal(merged.cm.counts, single.cm.counts)
        assert merged.counts == single.counts
        assert merged.report() == single.report()


class TestScores:
    def test_perfect_prediction_fixpoint(self, rng):
        gt_a, gt_b = _changed_scene(rng)
        evaluator = ScdEvaluator(K)
        evaluator.add(gt_a, gt_b, gt_a, gt_b)
        report = evaluator.report()
        assert report.oa == 1.0
        assert report.miou == 1.0
        assert report.sek == pytest.approx(1.0, abs=1e-12)
        assert report.kappa == pytest.approx(1.0, abs=1e-12)
        assert report.f_scd == report.p_scd == report.r_scd == 1.0

    def test_uniform_two_class_oa(self):
        assert compute_oa(ConfusionMatrix(np.array([[5, 5], [5, 5]]))) == 0.5

    def test_no_change_anywhere(self):
        zeros = np.zeros((4, 4), dtype=int)
        cm = accumulate(ConfusionMatrix.empty(K), zeros, zeros, zeros, zeros)
        assert binary_ious(cm) == (1.0, 0.0)
        assert compute_miou(cm) == 0.5
        assert compute_sek(cm) == 0.0

    def test_kappa_independent_prediction_near_zero(self, rng):
        maps = [rng.integers(0, K + 1, size=(200, 200)) for _ in range(4)]
        cm = accumulate(ConfusionMatrix.empty(K), *maps)
        assert abs(compute_kappa(cm)) < 0.1
        assert abs(compute_sek(cm)) < 0.1

    def test_kappa_degenerate_single_class(self):
        counts = np.zeros((K + 1, K + 1), dtype=np.int64)
        counts[2, 2] = 10
        assert compute_kappa(ConfusionMatrix(counts)) == 0.0

    def test_empty_matrix(self):
        for score in (compute_oa, compute_miou, compute_kappa, compute_sek):
            with pytest.raises(EmptyReductionError):
                score(ConfusionMatrix.empty(K))

    def test_wrong_class_everywhere(self, rng):
        gt_a, gt_b = _changed_scene(rng)
        pred_a = np.where(gt_a > 0, gt_a % K + 1, 0)
        pred_b = np.where(gt_b > 0, gt_b % K + 1, 0)
        f, p, r = compute_f_scd(count_scd(gt_a, gt_b, pred_a, pred_b, K))
        assert (f, p, r) == (0.0, 0.0, 0.0)

    def test_f_scd_counts(self):
        gt = np.array([[1, 2, 0, 0]])
        pred = np.array([[1, 3, 2, 0]])
        counts = count_scd(gt, gt, pred, pred, K)
        assert counts == ScdCounts(correct=2, pred_changed=6, gt_changed=4)
        f, p, r = compute_f_scd(counts)
        assert (p, r) == (pytest.approx(1 / 3), 0.5)
        assert f == pytest.approx(0.4)

    def test_empty_counts_resolve_to_zero(self):
        assert compute_f_scd(ScdCounts()) == (0.0, 0.0, 0.0)

    def test_report_score_weighting(self, rng):
        gt_a, gt_b, pred_a, pred_b = _random_maps(rng)
        cm = accumulate(ConfusionMatrix.empty(K), gt_a, gt_b, pred_a, pred_b)
        report = metric_report(cm, count_scd(gt_a, gt_b, pred_a, pred_b, K))
        assert report.score == pytest.approx(0.3 * report.miou + 0.7 * report.sek)
        assert report.csv_row()["oa"] == round(100 * report.oa, 2)


def _naive_metrics(quadruples, num_classes):
    """Per-pixel loops over plain Python ints; shares no code with the library."""
    table = [[0] * (num_classes + 1) for _ in range(num_classes + 1)]
    correct = pred_changed = gt_changed = 0
    for gt_a, gt_b, pred_a, pred_b in quadruples:
        rows, cols = gt_a.shape
        for i in range(rows):
            for j in range(cols):
                values = [int(m[i, j]) for m in (gt_a, gt_b, pred_a, pred_b)]
                if 255 in values:
                    continue
                for gt, pred in ((values[0], values[2]), (values[1], values[3])):
                    table[gt][pred] += 1
                    if pred != 0:
                        pred_changed += 1
                    if gt != 0:
                        gt_changed += 1
                        if pred == gt:
                            correct += 1

    size = num_classes + 1
    total = sum(sum(row) for row in table)
    oa = sum(table[i][i] for i in range(size)) / total
    tn = table[0][0]
    fp = sum(table[0][j] for j in range(1, size))
    fn = sum(table[i][0] for i in range(1, size))
    tp = total - tn - fp - fn
    iou_unchanged = tn / (tn + fp + fn)
    iou_changed = tp / (tp + fp + fn)

    table[0][0] = 0
    rest = sum(sum(row) for row in table)
    agree = sum(table[i][i] for i in range(size)) / rest
    chance = sum(
        sum(table[i]) * sum(table[r][i] for r in range(size)) for i in range(size)
    ) / (rest * rest)
    kappa = (agree - chance) / (1 - chance)

    precision = correct / pred_changed
    recall = correct / gt_changed
    return {
        "oa": oa,
        "miou": (iou_unchanged + iou_changed) / 2,
        "sek": kappa * math.exp(iou_changed - 1),
        "f_scd": 2 * precision * recall / (precision + recall),
    }


class TestNaiveOracle:
    NUM_CLASSES = 5

    def _quadruples(self, rng, count=100, size=16):
        quads = []
        for _ in range(count):
            maps = []
            for _ in range(4):
                m = rng.integers(0, self.NUM_CLASSES + 1, size=(size, size))
                m[rng.uniform(size=m.shape) < 0.1] = 255
                maps.append(m)
            quads.append(maps)
        return quads

    def test_stream_matches_per_pixel_loops(self, rng):
        quads = self._quadruples(rng)
        evaluator = ScdEvaluator(self.NUM_CLASSES)
        for quad in quads:
            evaluator.add(*quad)
        report = evaluator.report()
        expected = _naive_metrics(quads, self.NUM_CLASSES)
        for key, value in expected.items():
            assert getattr(report, key) == pytest.approx(value, abs=1e-12), key

    def test_each_quadruple_matches(self, rng):
        for quad in self._quadruples(rng, count=20):
            evaluator = ScdEvaluator(self.NUM_CLASSES)
            evaluator.add(*quad)
            report = evaluator.report()
            for key, value in _naive_metrics([quad], self.NUM_CLASSES).items():
                assert getattr(report, key) == pytest.approx(value, abs=1e-12), key
