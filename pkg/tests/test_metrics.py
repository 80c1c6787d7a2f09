import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rcmixup.metrics import MetricResult, aggregate_seeds, evaluate, mape, mean_std, rmse


def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([1.0, 2.0], [2.0, 4.0]) == pytest.approx(math.sqrt(2.5), abs=1e-9)
    Y = np.random.default_rng(0).normal(size=(7, 3))
    assert rmse(Y, Y + 1.0) == pytest.approx(1.0, abs=1e-9)


def test_mape_examples():
    assert mape([3.0], [3.0]) == 0.0
    assert mape([2.0], [1.0]) == pytest.approx(50.0, abs=1e-9)
    assert math.isfinite(mape([0.0], [1e-3]))
    assert mape([0.0], [1e-3]) == pytest.approx(1e-3 / 1e-8 * 100, rel=1e-12)


def test_metric_errors():
    with pytest.raises(ValueError):
        rmse([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        rmse([], [])
    with pytest.raises(ValueError):
        mape(np.ones((2, 2)), np.ones((2, 3)))


def test_aggregate_examples():
    one = aggregate_seeds([MetricResult(1.5, 10.0, 5)])
    assert one.rmse_std == 0.0 and one.count == 1
    agg = aggregate_seeds([MetricResult(v, 0.0, 1) for v in (1.0, 2.0, 3.0)])
    assert agg.rmse_mean == pytest.approx(2.0, abs=1e-9)
    assert agg.rmse_std == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        aggregate_seeds([])


def test_evaluate_bundles_both_metrics():
    r = evaluate([[2.0], [4.0]], [[1.0], [4.0]])
    assert r.n == 2
    assert r.rmse == pytest.approx(math.sqrt(0.5))
    assert r.mape == pytest.approx(25.0)


def test_mean_std_two_values():
    m, s = mean_std([1.0, 3.0])
    assert m == 2.0 and s == pytest.approx(math.sqrt(2.0), abs=1e-12)


matrices = st.integers(0, 10_000).map(lambda s: np.random.default_rng(s).normal(size=(6, 2)))


@settings(max_examples=50, deadline=None)
@given(a=matrices, b=matrices, c=st.floats(-50, 50).filter(lambda v: abs(v) > 1e-3))
def test_rmse_properties(a, b, c):
    assert rmse(a, b) == pytest.approx(rmse(b, a), abs=1e-12)
    assert (rmse(a, b) == 0) == np.array_equal(a, b)
    assert rmse(c * a, c * b) == pytest.approx(abs(c) * rmse(a, b), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(a=matrices, b=matrices, c=st.floats(1e-3, 1e3))
def test_mape_scale_invariant(a, b, c):
    a = np.abs(a) + 0.1
    assert mape(c * a, c * b) == pytest.approx(mape(a, b), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(vals=st.lists(st.floats(0, 100), min_size=1, max_size=8), seed=st.integers(0, 1000))
def test_aggregate_properties(vals, seed):
    results = [MetricResult(v, v / 2, 1) for v in vals]
    agg = aggregate_seeds(results)
    assert min(vals) - 1e-9 <= agg.rmse_mean <= max(vals) + 1e-9
    assert agg.rmse_std >= 0
    perm = np.random.default_rng(seed).permutation(len(vals))
    other = aggregate_seeds([results[i] for i in perm])
    assert (other.rmse_mean, other.rmse_std) == (agg.rmse_mean, agg.rmse_std)
