import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rcmixup.data import NoiseRecord
from rcmixup.nncore import ModelSpec, TrainState, init_params
from rcmixup.robust import (CleanSelection, O2UConfig, SelfieState, clean_count, detection_accuracy,
                            itlm_select, o2u_lr, o2u_rank, selfie_step)


def brute_force_subset(losses, k):
    """Lexicographically first size-k subset with the minimum loss sum."""
    best, best_sum = None, np.inf
    for combo in itertools.combinations(range(len(losses)), k):
        s = sum(losses[i] for i in combo)
        if s < best_sum:
            best, best_sum = combo, s
    return best, best_sum


def record(indices):
    idx = np.asarray(indices, dtype=int)
    return NoiseRecord(idx, np.zeros((len(idx), 1)))


# ---- ITLM

def test_itlm_examples():
    assert itlm_select([3, 1, 2], 2 / 3).indices.tolist() == [1, 2]
    assert itlm_select([1, 1, 1], 1 / 3).indices.tolist() == [0]


def test_clean_count_floor():
    assert clean_count(0.7, 1000) == 700
    assert clean_count(0.7, 10) == 7
    assert clean_count(0.35, 10) == 3


def test_itlm_errors():
    with pytest.raises(ValueError):
        itlm_select([], 0.5)
    with pytest.raises(ValueError):
        itlm_select([1.0, 2.0], 0.0)
    with pytest.raises(ValueError):
        itlm_select([1.0, 2.0], 1.5)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(1, 10), tau=st.floats(0.05, 1.0))
def test_itlm_matches_brute_force(seed, n, tau):
    losses = np.random.default_rng(seed).exponential(size=n)
    sel = itlm_select(losses, tau)
    k = clean_count(tau, n)
    combo, total = brute_force_subset(losses, k)
    assert len(sel) == k
    assert sel.indices.tolist() == list(combo)
    assert losses[sel.indices].sum() == pytest.approx(total)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(1, 40), tau=st.floats(0.05, 1.0),
       scale=st.floats(1e-3, 1e3))
def test_itlm_scale_invariant_and_separating(seed, n, tau, scale):
    rng = np.random.default_rng(seed)
    losses = rng.integers(0, 5, size=n).astype(float)  # many ties
    sel = itlm_select(losses, tau)
    assert np.array_equal(itlm_select(losses * scale, tau).indices, sel.indices)
    rest = np.setdiff1d(np.arange(n), sel.indices)
    if len(sel) and len(rest):
        assert losses[sel.indices].max() <= losses[rest].min()
        # ties at the boundary go to the lower index
        edge = losses[sel.indices].max()
        tied_in = sel.indices[losses[sel.indices] == edge]
        tied_out = rest[losses[rest] == edge]
        if len(tied_in) and len(tied_out):
            assert tied_in.max() < tied_out.min()


def test_selection_json():
    sel = itlm_select([0.5, 0.1, 0.3], 2 / 3)
    assert json.loads(sel.to_json()) == {"tau": 2 / 3, "indices": [1, 2]}


# ---- O2U

def test_o2u_schedule_endpoints():
    cfg = O2UConfig(cycle_length=5, n_cycles=2, lr_max=0.1, lr_min=0.01)
    assert o2u_lr(cfg, 0) == pytest.approx(0.1)
    assert o2u_lr(cfg, 4) == pytest.approx(0.01)
    assert o2u_lr(cfg, 5) == pytest.approx(0.1)
    lrs = [o2u_lr(cfg, e) for e in range(5)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_o2u_config_validation():
    with pytest.raises(ValueError):
        O2UConfig(cycle_length=1)
    with pytest.raises(ValueError):
        O2UConfig(lr_max=1e-4, lr_min=1e-3)
    with pytest.raises(ValueError):
        O2UConfig(n_cycles=0)


def _o2u_problem(n=40, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    Y = X @ np.array([[1.0], [-1.0]])
    Y[3] += 25.0  # one grossly corrupted label
    state = TrainState.create(init_params(ModelSpec(2, (8,), 1), seed))
    return state, X, Y


def test_o2u_excludes_dominant_loss_and_counts():
    state, X, Y = _o2u_problem()
    sel = o2u_rank(state, X, Y, O2UConfig(cycle_length=3, n_cycles=2), 0.75, np.random.default_rng(0), 8)
    assert len(sel) == clean_count(0.75, 40)
    assert 3 not in sel.indices
    # the exclusion set is exactly the top of the mean-loss ranking
    dropped = np.setdiff1d(np.arange(40), sel.indices)
    assert sel.losses[dropped].min() >= sel.losses[sel.indices].max()


def test_o2u_leaves_input_state_untouched():
    state, X, Y = _o2u_problem()
    before = state.params.fingerprint()
    o2u_rank(state, X, Y, O2UConfig(cycle_length=2, n_cycles=1), 0.5, np.random.default_rng(0))
    assert state.params.fingerprint() == before


# ---- SELFIE

def test_selfie_identical_predictions_refurbish():
    labels = np.array([[0.0], [0.0], [10.0], [0.0]])
    st_ = SelfieState.create(labels, q=3, threshold=0.0)
    losses = np.array([0.0, 0.0, 100.0, 0.0])
    for _ in range(3):
        st_, core, view = selfie_step(st_, np.full((4, 1), 1.5), losses, 0.75)
    assert core.indices.tolist() == [0, 1, 3]
    assert view.refurbished.tolist() == [2]
    assert view.labels[2, 0] == 1.5
    assert view.indices.tolist() == [0, 1, 2, 3]


def test_selfie_two_step_history():
    labels = np.array([[5.0], [0.0]])
    losses = np.array([9.0, 0.0])
    for threshold, expect in ((1.0, [0]), (0.99, [])):
        st_ = SelfieState.create(labels, q=2, threshold=threshold)
        st_, _, _ = selfie_step(st_, np.array([[0.0], [0.0]]), losses, 0.5)
        st_, _, view = selfie_step(st_, np.array([[2.0], [0.0]]), losses, 0.5)
        mean, var = st_.prediction_stats()
        assert mean[0, 0] == 1.0 and var[0] == 1.0
        assert view.refurbished.tolist() == expect
        if expect:
            assert view.labels[0, 0] == 1.0


def test_selfie_requires_full_buffer():
    labels = np.zeros((3, 1))
    st_ = SelfieState.create(labels, q=4, threshold=10.0)
    for _ in range(3):
        st_, _, view = selfie_step(st_, np.zeros((3, 1)), np.array([0.0, 0.0, 5.0]), 2 / 3)
        assert view.refurbished.size == 0
    st_, _, view = selfie_step(st_, np.zeros((3, 1)), np.array([0.0, 0.0, 5.0]), 2 / 3)
    assert view.refurbished.tolist() == [2]


def test_selfie_ring_buffer_keeps_last_q():
    st_ = SelfieState.create(np.zeros((1, 1)), q=2)
    for v in (1.0, 2.0, 3.0):
        st_ = st_.push([[v]])
    mean, var = st_.prediction_stats()
    assert mean[0, 0] == 2.5 and var[0] == 0.25


def test_selfie_multidim_variance_is_mean_over_dims():
    st_ = SelfieState.create(np.zeros((1, 2)), q=2)
    st_ = st_.push([[0.0, 0.0]]).push([[2.0, 4.0]])
    _, var = st_.prediction_stats()
    assert var[0] == pytest.approx((1.0 + 4.0) / 2)


def test_selfie_shape_mismatch():
    st_ = SelfieState.create(np.zeros((3, 1)), q=2)
    with pytest.raises(ValueError):
        selfie_step(st_, np.zeros((2, 1)), np.zeros(3), 0.5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), q=st.integers(1, 4), pct=st.floats(0, 100))
def test_selfie_never_refurbishes_above_threshold(seed, q, pct):
    rng = np.random.default_rng(seed)
    n = 12
    st_ = SelfieState.create(rng.normal(size=(n, 1)), q=q, percentile=pct)
    for _ in range(q + 1):
        preds = rng.normal(size=(n, 1))
        st_, core, view = selfie_step(st_, preds, rng.exponential(size=n), 0.5)
    mean, var = st_.prediction_stats()
    threshold = np.percentile(var, pct)
    assert np.all(var[view.refurbished] <= threshold)
    assert not np.intersect1d(view.refurbished, core.indices).size
    np.testing.assert_array_equal(view.labels[view.refurbished], mean[view.refurbished])
    untouched = np.setdiff1d(np.arange(n), view.refurbished)
    np.testing.assert_array_equal(view.labels[untouched], st_.labels[untouched])


# ---- detection accuracy

def test_detection_examples():
    sel = CleanSelection(np.array([0, 1, 2]), 0.5)
    assert detection_accuracy(sel, record([3, 4, 5])) == 100.0
    assert detection_accuracy(sel, record([0, 1])) == 0.0
    assert detection_accuracy(CleanSelection(np.array([0, 9]), 0.5), record([0, 3, 4, 5])) == 75.0
    assert detection_accuracy(sel, record([])) is None


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_detection_in_range(seed):
    rng = np.random.default_rng(seed)
    sel = CleanSelection(np.sort(rng.choice(50, 20, replace=False)), 0.4)
    acc = detection_accuracy(sel, record(np.sort(rng.choice(50, 10, replace=False))))
    assert 0.0 <= acc <= 100.0
