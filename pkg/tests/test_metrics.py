import warnings
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctkidney.errors import IndexOutOfRange, LengthMismatch, SingleClass
from ctkidney.manifest import LabelCodec
from ctkidney.metrics import (
    EvaluationReport,
    UndefinedMetricWarning,
    average_precision,
    confusion_matrix,
    evaluate,
    f1_from,
    macro_average,
    per_class_metrics,
    pr_curve,
    report_from_predictions,
    roc_auc,
    round_half_up,
)
from oracles import confusion_loop, pairwise_auc, per_class_loop, pr_loop

CLASSES = ["Cyst", "Normal", "Stone", "Tumor"]


class TestConfusion:
    def test_perfect(self):
        y = np.repeat(np.arange(4), 3)
        np.testing.assert_array_equal(confusion_matrix(y, y, 4), np.diag([3, 3, 3, 3]))

    def test_hand_count(self):
        assert confusion_matrix([0, 0, 1], [0, 1, 1], 2).tolist() == [[1, 1], [0, 1]]

    def test_random_200_matches_loop(self):
        rng = np.random.default_rng(0)
        t, p = rng.integers(0, 5, 200), rng.integers(0, 5, 200)
        assert confusion_matrix(t, p, 5).tolist() == confusion_loop(t, p, 5)

    def test_errors(self):
        with pytest.raises(LengthMismatch):
            confusion_matrix([0, 1], [0], 2)
        with pytest.raises(IndexOutOfRange):
            confusion_matrix([0, 2], [0, 1], 2)


class TestPerClass:
    @pytest.mark.parametrize("p,r,f1", [(0.87, 0.98, "0.92"), (0.77, 0.54, "0.63")])
    def test_table_f1(self, p, r, f1):
        assert str(round_half_up(f1_from(p, r))) == f1

    def test_zero_predicted_positives_warns(self):
        cm = np.array([[2, 0], [1, 0]])
        with pytest.warns(UndefinedMetricWarning):
            m = per_class_metrics(cm)
        assert m["precision"][1] == 0.0 and m["f1"][1] == 0.0

    def test_macro_examples(self):
        assert macro_average([0.87, 0.96, 0.79, 0.87]) == pytest.approx(0.8725, abs=1e-12)
        assert macro_average([0.98, 1.0, 0.92, 0.94]) == pytest.approx(0.96, abs=1e-12)
        assert macro_average([0.3]) == 0.3
        with pytest.raises(ValueError):
            macro_average([])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 6), st.integers(1, 120), st.integers(0, 2**31 - 1))
    def test_oracle_and_identity(self, k, n, seed):
        rng = np.random.default_rng(seed)
        t, p = rng.integers(0, k, n), rng.integers(0, k, n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UndefinedMetricWarning)
            m = per_class_metrics(confusion_matrix(t, p, k))
        for c, (prec, rec, f1) in enumerate(per_class_loop(t.tolist(), p.tolist(), k)):
            assert abs(m["precision"][c] - prec) < 1e-12
            assert abs(m["recall"][c] - rec) < 1e-12
            assert abs(m["f1"][c] - f1) < 1e-12
        np.testing.assert_array_equal(m["support"], np.bincount(t, minlength=k))


class TestCurves:
    def test_perfect_separation(self):
        y = [0, 0, 1, 1]
        s = [0.1, 0.2, 0.8, 0.9]
        assert roc_auc(y, s)[1] == 1.0
        pr = pr_curve(y, s)
        for level in np.unique(pr[:, 0]):
            assert pr[pr[:, 0] == level, 1].max() == 1.0

    def test_all_equal_scores(self):
        pts, auc = roc_auc([0, 1, 0, 1, 1], [0.5] * 5)
        assert auc == 0.5
        assert pts.tolist() == [[0.0, 0.0], [1.0, 1.0]]

    def test_positive_ranked_last(self):
        y = [0] * 9 + [1]
        s = np.linspace(1.0, 0.1, 10)
        pr = pr_curve(y, s)
        assert pr[-1].tolist() == pytest.approx([1.0, 0.1])

    def test_single_class(self):
        with pytest.raises(SingleClass):
            roc_auc([1, 1, 1], [0.2, 0.3, 0.4])

    def test_endpoints(self):
        rng = np.random.default_rng(3)
        pts, _ = roc_auc(rng.integers(0, 2, 30) | np.eye(30, dtype=int)[0], rng.random(30))
        assert pts[0].tolist() == [0.0, 0.0] and pts[-1].tolist() == [1.0, 1.0]
        assert np.all(np.diff(pts, axis=0) >= 0)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 60), st.integers(0, 2**31 - 1), st.booleans())
    def test_curve_oracles(self, n, seed, coarse):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 4, n) / 4 if coarse else rng.random(n)
        _, auc = roc_auc(y, s)
        assert abs(auc - pairwise_auc(y.tolist(), s.tolist())) < 1e-9
        assert abs(auc + roc_auc(y, -s)[1] - 1.0) < 1e-9
        assert pr_curve(y, s).tolist() == [list(p) for p in pr_loop(y.tolist(), s.tolist())]

    def test_against_sklearn(self):
        sk = pytest.importorskip("sklearn.metrics")
        rng = np.random.default_rng(9)
        for _ in range(50):
            y = rng.integers(0, 2, 80)
            s = np.round(rng.random(80), 1)
            assert roc_auc(y, s)[1] == pytest.approx(sk.roc_auc_score(y, s), abs=1e-12)
            ap = average_precision(pr_curve(y, s))
            assert ap == pytest.approx(sk.average_precision_score(y, s), abs=1e-12)


class TestReport:
    def test_oracle_model(self):
        y = np.repeat(np.arange(4), 5)
        rep = report_from_predictions(y, np.eye(4)[y], CLASSES)
        np.testing.assert_array_equal(rep.confusion, np.diag([5] * 4))
        assert all(v == 1.0 for v in rep.macro.values())
        assert rep.accuracy == 1.0

    def test_uniform_model(self):
        y = np.repeat(np.arange(4), 5)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UndefinedMetricWarning)
            rep = report_from_predictions(y, np.full((20, 4), 0.25), CLASSES)
        # argmax picks class 0 for every row: its precision equals its prevalence
        assert rep.per_class["Cyst"]["precision"] == 0.25
        assert all(rep.per_class[c]["auc"] == 0.5 for c in CLASSES)
        assert rep.warnings

    def test_absent_class_auc_none(self):
        y = np.array([0, 1, 2, 0, 1, 2])
        probs = np.random.default_rng(0).dirichlet(np.ones(4), 6)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UndefinedMetricWarning)
            rep = report_from_predictions(y, probs, CLASSES)
        assert rep.per_class["Tumor"]["auc"] is None
        assert rep.macro["auc"] == pytest.approx(np.mean([rep.per_class[c]["auc"] for c in CLASSES[:3]]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_invariants(self, seed):
        rng = np.random.default_rng(seed)
        y = np.r_[np.arange(4), rng.integers(0, 4, 36)]
        probs = rng.dirichlet(np.ones(4), len(y))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UndefinedMetricWarning)
            rep = report_from_predictions(y, probs, CLASSES)
            perm = rng.permutation(4)
            inv = np.argsort(perm)
            rep2 = report_from_predictions(inv[y], probs[:, perm], [CLASSES[i] for i in perm])
        assert rep.confusion.sum(1).tolist() == [rep.per_class[c]["support"] for c in CLASSES]
        assert rep.accuracy == pytest.approx(np.trace(rep.confusion) / len(y))
        for c in CLASSES:
            m = rep.per_class[c]
            for key in ("precision", "recall", "f1", "auc"):
                assert 0.0 <= m[key] <= 1.0
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UndefinedMetricWarning)
                assert m["f1"] == pytest.approx(f1_from(m["precision"], m["recall"]), abs=1e-12)
            for key in ("precision", "recall", "f1", "auc"):
                assert rep2.per_class[c][key] == pytest.approx(m[key], abs=1e-12)
        for key in rep.macro:
            assert rep2.macro[key] == pytest.approx(rep.macro[key], abs=1e-12)
            assert rep.macro[key] == pytest.approx(np.mean([rep.per_class[c][key] for c in CLASSES]), abs=1e-12)

    def test_dict_round_trip_and_table(self):
        y = np.array([0, 1, 2, 3, 0, 1, 2, 3])
        probs = np.random.default_rng(1).dirichlet(np.ones(4), 8)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UndefinedMetricWarning)
            rep = report_from_predictions(y, probs, CLASSES)
        back = EvaluationReport.from_dict(rep.to_dict())
        assert back.render_table() == rep.render_table()
        assert rep.render_table().splitlines()[0] == "class\tprecision\trecall\tf1\tauc\tsupport"

    def test_evaluate_with_stream(self):
        from ctkidney.augment import ArrayStream

        y = np.repeat(np.arange(4), 3)
        x = np.zeros((12, 4, 4, 3), np.float32)
        x[:, 0, 0, 0] = y
        rep = evaluate(lambda b: np.eye(4)[b[:, 0, 0, 0].astype(int)], ArrayStream(x, y, 5), LabelCodec(CLASSES))
        assert rep.accuracy == 1.0 and rep.classes == CLASSES


@pytest.mark.parametrize("x,expected", [(0.795, "0.80"), (0.8725, "0.87"), (0.875, "0.88"), (0.125, "0.13"), (1.0, "1.00")])
def test_round_half_up(x, expected):
    assert round_half_up(x) == Decimal(expected)
