import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scfcrc.metrics import MetricError, auc, average_precision, f1_macro, score_report

from .oracles import ap_thresholds, auc_pairs, f1_confusion


def test_auc_four_points():
    assert auc([0.9, 0.8, 0.4, 0.1], [1, 0, 1, 0]) == pytest.approx(0.75, abs=1e-12)


def test_auc_edges():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(MetricError):
        auc([0.1, 0.2], [1, 1])


def test_ap_examples():
    assert average_precision([0.9, 0.5, 0.1], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-12)
    assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert average_precision([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]) == pytest.approx(0.25)
    with pytest.raises(MetricError):
        average_precision([0.1, 0.2], [0, 0])


def test_ap_tied_threshold():
    # one tied block containing both classes: precision 1/2 at recall 1
    assert average_precision([0.5, 0.5], [1, 0]) == pytest.approx(0.5)


def test_f1_examples():
    y = [0] * 90 + [1] * 10
    assert f1_macro([0] * 100, y) == pytest.approx((2 * 0.9 / 1.9) / 2, abs=1e-12)
    assert f1_macro(y, y) == 1.0


def test_f1_class_swap_symmetry(rng):
    y = rng.integers(0, 2, 60)
    p = rng.integers(0, 2, 60)
    assert f1_macro(p, y) == pytest.approx(f1_macro(1 - p, 1 - y))


def test_threshold_is_strict():
    r = score_report([0.5, 0.51, 0.2, 0.9], [0, 1, 0, 1])
    assert r["f1_macro"] == 1.0


def test_perfect_and_null_predictors(rng):
    y = np.array([0, 1] * 50)
    r = score_report(y.astype(float), y)
    assert r == {"auc": 1.0, "ap": 1.0, "f1_macro": 1.0}
    big = rng.integers(0, 2, 20000)
    assert abs(auc(rng.random(20000), big) - 0.5) < 0.05


def test_length_mismatch():
    with pytest.raises(MetricError):
        auc([0.1, 0.2, 0.3], [0, 1])
    with pytest.raises(MetricError):
        f1_macro([0, 1], [0])


def test_matches_oracles_on_random_instances():
    rng = np.random.default_rng(77)
    for _ in range(100):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        # coarse grid so ties occur
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        assert auc(s, y) == pytest.approx(auc_pairs(s, y), abs=1e-12)
        assert average_precision(s, y) == pytest.approx(ap_thresholds(list(s), list(y)), abs=1e-12)
        pred = (s > 0.5).astype(int)
        assert f1_macro(pred, y) == pytest.approx(f1_confusion(pred, y), abs=1e-12)


scored = st.integers(4, 60).flatmap(lambda n: st.tuples(
    st.lists(st.integers(-1000, 1000), min_size=n, max_size=n, unique=True),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
)).filter(lambda t: 0 < sum(t[1]) < len(t[1]))


@given(scored)
@settings(max_examples=100, deadline=None)
def test_auc_monotone_invariance(data):
    s, y = np.asarray(data[0]) / 10.0, np.asarray(data[1])
    assert auc(np.exp(s / 20.0) * 3 + 1, y) == pytest.approx(auc(s, y), abs=1e-12)


@given(scored)
@settings(max_examples=100, deadline=None)
def test_auc_negation_complement(data):
    s, y = np.asarray(data[0]) / 10.0, np.asarray(data[1])
    assert auc(s, y) + auc(-s, y) == pytest.approx(1.0, abs=1e-12)


@given(scored)
@settings(max_examples=50, deadline=None)
def test_metric_ranges(data):
    s, y = np.asarray(data[0]) / 10.0, np.asarray(data[1])
    r = score_report(1 / (1 + np.exp(-s)), y)
    assert all(0.0 <= v <= 1.0 for v in r.values())
