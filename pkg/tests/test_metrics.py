"""Evaluation statistics against brute-force oracles and hand-computed cases."""

import math

import numpy as np
import pytest

from laminet import metrics
from laminet.errors import ClassError, DataError, LabelError, PairingError, ShapeError
from laminet.metrics import ConfusionCounts, ScoredSet


def brute_force_auc(scores, labels):
    """All-pairs comparison: wins count 1, ties 0.5."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = [1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg]
    return math.fsum(total) / (len(pos) * len(neg))


def random_set(rng, n=30, tie_fraction=0.0):
    labels = rng.integers(0, 2, size=n)
    while labels.min() == labels.max():
        labels = rng.integers(0, 2, size=n)
    scores = rng.random(n)
    if tie_fraction:
        k = max(1, int(n * tie_fraction))
        scores[rng.choice(n, size=k, replace=False)] = rng.choice([0.3, 0.7], size=k)
    return ScoredSet(scores, labels)


class TestScoredSet:
    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            ScoredSet(np.zeros(3), np.zeros(2))

    def test_nonbinary_labels(self):
        with pytest.raises(LabelError):
            ScoredSet(np.zeros(2), np.array([0, 2]))

    def test_id_length_checked(self):
        with pytest.raises(ShapeError):
            ScoredSet(np.zeros(2), np.zeros(2), scan_ids=("a",))


class TestAuc:
    def test_perfect_separation(self):
        s = ScoredSet([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert metrics.auc(s) == 1.0

    def test_all_ties(self):
        s = ScoredSet([0.5] * 6, [1, 1, 1, 0, 0, 0])
        assert metrics.auc(s) == 0.5

    def test_hand_case(self):
        # pos .9 beats both negs, pos .4 beats .1 and loses to .5: 3 of 4 pairs.
        s = ScoredSet([0.9, 0.4, 0.5, 0.1], [1, 1, 0, 0])
        assert metrics.auc(s) == 0.75

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(100)
        for _ in range(50):
            s = random_set(rng, n=25, tie_fraction=0.4)
            want = brute_force_auc(s.scores, s.labels)
            assert abs(metrics.auc(s) - want) < 1e-12

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(101)
        s = random_set(rng, n=40, tie_fraction=0.3)
        warped = ScoredSet(np.exp(3.0 * s.scores) - 0.5, s.labels)
        assert metrics.auc(warped) == pytest.approx(metrics.auc(s), abs=1e-12)

    def test_single_class_raises(self):
        with pytest.raises(ClassError):
            metrics.auc(ScoredSet([0.1, 0.2], [1, 1]))


class TestRocPoints:
    def test_separated_staircase(self):
        s = ScoredSet([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        pts = metrics.roc_points(s)
        assert pts[0] == (0.0, 0.0)
        assert (0.0, 1.0) in pts
        assert pts[-1] == (1.0, 1.0)

    def test_all_ties_two_points(self):
        s = ScoredSet([0.4] * 4, [1, 0, 1, 0])
        assert metrics.roc_points(s) == [(0.0, 0.0), (1.0, 1.0)]

    def test_monotone_both_coordinates(self):
        rng = np.random.default_rng(102)
        for _ in range(20):
            pts = metrics.roc_points(random_set(rng, tie_fraction=0.3))
            xs = [p[0] for p in pts]
            ys = [p[1] for p in pts]
            assert xs == sorted(xs)
            assert ys == sorted(ys)


class TestConfusionAndRates:
    def test_threshold_zero_all_positive(self):
        s = ScoredSet([0.2, 0.8, 0.5], [1, 0, 1])
        r = metrics.rates(metrics.confusion_at(s, 0.0))
        assert r.sensitivity == 1.0

    def test_threshold_above_one_all_negative(self):
        s = ScoredSet([0.2, 0.8, 0.5], [1, 0, 1])
        c = metrics.confusion_at(s, 1.5)
        r = metrics.rates(c)
        assert r.specificity == 1.0
        assert c.tp == 0

    def test_boundary_is_predicted_positive(self):
        s = ScoredSet([0.5], [1])
        assert metrics.confusion_at(s, 0.5).tp == 1

    def test_hand_f1(self):
        r = metrics.rates(ConfusionCounts(tp=3, fp=1, tn=5, fn=1))
        assert r.f1 == pytest.approx(0.75)
        assert r.precision == pytest.approx(0.75)
        assert not r.undefined

    def test_counts_partition_the_set(self):
        rng = np.random.default_rng(103)
        s = random_set(rng, n=37)
        c = metrics.confusion_at(s, 0.5)
        assert c.total == 37

    def test_undefined_rates_flagged_zero(self):
        # No predicted positives: precision undefined, F scores undefined.
        r = metrics.rates(ConfusionCounts(tp=0, fp=0, tn=3, fn=2))
        assert r.precision == 0.0
        assert r.f1 == 0.0
        assert "precision" in r.undefined
        assert "f1" in r.undefined

    def test_fbeta_weights_recall(self):
        # High recall, low precision: F2 should exceed F1.
        r = metrics.rates(ConfusionCounts(tp=8, fp=8, tn=2, fn=0))
        assert r.fbeta > r.f1


class TestSelectThresholdF2:
    def sweep_oracle(self, s):
        best = (-1.0, math.inf)
        for t in sorted(set(s.scores.tolist()) | {math.inf}):
            f2 = metrics.rates(metrics.confusion_at(s, t)).fbeta
            if f2 > best[0] or (f2 == best[0] and t > best[1]):
                best = (f2, t)
        return best

    def test_separated_achieves_perfect_f2(self):
        s = ScoredSet([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        t = metrics.select_threshold_f2(s)
        assert metrics.rates(metrics.confusion_at(s, t)).fbeta == 1.0

    def test_matches_sweep_oracle(self):
        rng = np.random.default_rng(104)
        for _ in range(50):
            s = random_set(rng, n=20, tie_fraction=0.3)
            t = metrics.select_threshold_f2(s)
            want_f2, want_t = self.sweep_oracle(s)
            assert t == want_t
            assert metrics.rates(metrics.confusion_at(s, t)).fbeta == want_f2

    def test_all_ties_returns_common_score(self):
        # All-positive prediction beats predicting nothing, so the shared
        # score wins over the sentinel.
        s = ScoredSet([0.4] * 4, [1, 0, 1, 0])
        assert metrics.select_threshold_f2(s) == 0.4


class TestDeLong:
    def test_identical_classifiers(self):
        rng = np.random.default_rng(105)
        s = random_set(rng, n=30)
        d = metrics.delong_paired(s, s)
        assert d.delta == 0.0
        assert d.p_value == 1.0

    def test_component_mean_identity(self):
        rng = np.random.default_rng(106)
        a = random_set(rng, n=40, tie_fraction=0.2)
        b = ScoredSet(rng.random(40), a.labels)
        d = metrics.delong_paired(a, b)
        assert d.v10[:, 0].mean() == pytest.approx(metrics.auc(a), abs=1e-12)
        assert d.v01[:, 0].mean() == pytest.approx(metrics.auc(a), abs=1e-12)
        assert d.v10[:, 1].mean() == pytest.approx(metrics.auc(b), abs=1e-12)

    def test_clear_difference_is_significant(self):
        rng = np.random.default_rng(107)
        labels = np.array([1, 0] * 40)
        strong = ScoredSet(labels + 0.1 * rng.normal(size=80), labels)
        weak = ScoredSet(rng.normal(size=80), labels)
        d = metrics.delong_paired(strong, weak)
        assert d.p_value < 0.01
        assert d.auc_a > d.auc_b

    def test_mismatched_labels_raise(self):
        a = ScoredSet([0.1, 0.9, 0.5, 0.3], [1, 0, 1, 0])
        b = ScoredSet([0.1, 0.9, 0.5, 0.3], [0, 1, 1, 0])
        with pytest.raises(PairingError):
            metrics.delong_paired(a, b)

    def test_mismatched_ids_raise(self):
        a = ScoredSet([0.1, 0.9] * 2, [1, 0, 1, 0], scan_ids=("a", "b", "c", "d"))
        b = ScoredSet([0.2, 0.8] * 2, [1, 0, 1, 0], scan_ids=("a", "b", "c", "e"))
        with pytest.raises(PairingError):
            metrics.delong_paired(a, b)

    def test_null_rejection_rate_calibrated(self):
        rng = np.random.default_rng(108)
        trials = 120
        rejections = 0
        labels = np.array([1] * 30 + [0] * 30)
        for _ in range(trials):
            a = ScoredSet(labels + rng.normal(size=60), labels)
            b = ScoredSet(labels + rng.normal(size=60), labels)
            if metrics.delong_paired(a, b).p_value < 0.05:
                rejections += 1
        rate = rejections / trials
        half_width = 1.96 * math.sqrt(0.05 * 0.95 / trials)
        assert abs(rate - 0.05) <= half_width + 1e-9


class TestKappa:
    def test_identical_raters(self):
        r = [0, 1, 1, 0, 1]
        assert metrics.cohen_kappa(r, r).kappa == 1.0

    def test_hand_2x2_table(self):
        # 40 agree-positive, 40 agree-negative, 10+10 disagreements.
        r1 = [1] * 50 + [0] * 50
        r2 = [1] * 40 + [0] * 10 + [1] * 10 + [0] * 40
        k = metrics.cohen_kappa(r1, r2)
        assert k.kappa == 0.6
        assert k.p_o == 0.8
        assert k.p_e == 0.5

    def test_symmetry(self):
        rng = np.random.default_rng(109)
        r1 = rng.integers(0, 2, 50)
        r2 = rng.integers(0, 2, 50)
        assert metrics.cohen_kappa(r1, r2).kappa == pytest.approx(
            metrics.cohen_kappa(r2, r1).kappa)

    def test_independent_raters_near_zero(self):
        rng = np.random.default_rng(110)
        r1 = rng.integers(0, 2, 5000)
        r2 = rng.integers(0, 2, 5000)
        assert abs(metrics.cohen_kappa(r1, r2).kappa) < 0.05

    def test_degenerate_flagged(self):
        k = metrics.cohen_kappa([1, 1, 1], [1, 1, 1])
        assert k.degenerate
        assert k.kappa == 0.0

    def test_length_mismatch(self):
        with pytest.raises(PairingError):
            metrics.cohen_kappa([0, 1], [0, 1, 1])

    def test_light_is_mean_of_pairwise(self):
        rng = np.random.default_rng(111)
        raters = [rng.integers(0, 2, 60) for _ in range(3)]
        lk = metrics.light_kappa(raters)
        pair = [metrics.cohen_kappa(raters[i], raters[j]).kappa
                for i in range(3) for j in range(i + 1, 3)]
        assert lk.kappa == pytest.approx(np.mean(pair))
        assert lk.pairwise == tuple(pair)


class TestReports:
    def make_report(self, seed, auc_value):
        return metrics.EvalReport(auc=auc_value, sensitivity=0.9, specificity=0.8,
                                  f1=0.85, threshold=0.5, seed=seed)

    def test_single_report_zero_std(self):
        agg = metrics.aggregate_runs([self.make_report(0, 0.9)])
        assert agg.std["auc"] == 0.0
        assert agg.auc == 0.9

    def test_two_reports_population_std(self):
        agg = metrics.aggregate_runs([self.make_report(0, 0.8), self.make_report(1, 0.9)])
        assert agg.auc == pytest.approx(0.85)
        assert agg.std["auc"] == pytest.approx(0.05)

    def test_empty_raises(self):
        with pytest.raises(DataError):
            metrics.aggregate_runs([])

    def test_format_style(self):
        assert metrics.format_metric(0.908, 0.0051) == "0.9080 (±0.0051)"

    def test_evaluate_roundtrip(self):
        rng = np.random.default_rng(112)
        s = random_set(rng, n=25)
        rep = metrics.evaluate(s, seed=7)
        back = metrics.EvalReport.from_dict(rep.to_dict())
        assert back == rep

    def test_roc_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(113)
        pts = metrics.roc_points(random_set(rng))
        path = tmp_path / "roc.csv"
        metrics.write_roc_csv(path, pts)
        assert metrics.read_roc_csv(path) == pts
