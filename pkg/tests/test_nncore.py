import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rcmixup.nncore import (Batch, HiddenMixBatch, ModelSpec, NonFiniteLossError, Params, TrainState,
                            adam_update, forward, forward_mixed_hidden, grad_and_step, init_params,
                            loss_and_grads, per_sample_losses, train_epoch)


def tiny_net(w1, b1, w2, b2):
    return Params.from_arrays([np.array([[w1]], float), np.array([[w2]], float)],
                              [np.array([b1], float), np.array([b2], float)])


def batch_loss(params, batch):
    if isinstance(batch, HiddenMixBatch):
        out = forward_mixed_hidden(params, batch.x_a, batch.x_b, batch.lam, batch.layer)
    else:
        out = forward(params, batch.x)
    return float(np.mean((out - batch.y) ** 2))


def numeric_grad(params, batch, h=1e-5):
    flat = params.flat
    g = np.empty_like(flat)
    for k in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[k] += h
        down[k] -= h
        g[k] = (batch_loss(params.with_flat(up), batch) - batch_loss(params.with_flat(down), batch)) / (2 * h)
    return g


def random_point(spec, rng, batch_size, margin=1e-3):
    """Random parameters and batch with every pre-activation away from the ReLU kink."""
    while True:
        p = init_params(spec, 0)
        p = p.with_flat(rng.normal(scale=0.7, size=p.flat.size))
        b = Batch(rng.normal(size=(batch_size, spec.input_dim)), rng.normal(size=(batch_size, spec.output_dim)))
        _, trace = forward(p, b.x, return_trace=True)
        if min(np.abs(z).min() for z in trace.pre[:-1]) > margin:
            return p, b


def max_rel_error(analytic, numeric, floor=1e-6):
    mask = np.maximum(np.abs(analytic), np.abs(numeric)) > floor
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(analytic - numeric)[mask] / np.maximum(np.abs(analytic), np.abs(numeric))[mask]))


# ---- init_params

def test_init_shapes():
    p = init_params(ModelSpec(5, (128,), 1), seed=0)
    assert [w.shape for w in p.weights] == [(5, 128), (128, 1)]
    assert [b.shape for b in p.biases] == [(128,), (1,)]
    assert all(np.all(b == 0) for b in p.biases)


def test_init_deterministic_and_seed_dependent():
    spec = ModelSpec(5, (128,), 1)
    assert np.array_equal(init_params(spec, 0).flat, init_params(spec, 0).flat)
    assert not np.array_equal(init_params(spec, 0).flat, init_params(spec, 1).flat)


def test_model_spec_rejects_bad_dims():
    with pytest.raises(ValueError):
        ModelSpec(3, (), 1)
    with pytest.raises(ValueError):
        ModelSpec(3, (0,), 1)


def test_params_views_share_flat_storage():
    p = init_params(ModelSpec(3, (4,), 2), 0)
    assert p.flat.size == 3 * 4 + 4 * 2 + 4 + 2
    q = Params.from_arrays(p.weights, p.biases)
    assert np.array_equal(q.flat, p.flat)


# ---- forward

def test_forward_zero_params():
    p = init_params(ModelSpec(3, (4,), 2), 0).zeros_like()
    assert np.all(forward(p, np.ones((5, 3))) == 0)


def test_forward_hand_evaluation():
    net = tiny_net(1, 0, 3, 1)
    assert forward(net, np.array([2.0]))[0] == pytest.approx(7.0)
    assert forward(net, np.array([-2.0]))[0] == pytest.approx(1.0)


def test_forward_dimension_mismatch():
    p = init_params(ModelSpec(3, (4,), 1), 0)
    with pytest.raises(ValueError):
        forward(p, np.ones((2, 4)))


def test_forward_trace_depth():
    p = init_params(ModelSpec(3, (4, 5), 1), 0)
    _, trace = forward(p, np.ones((2, 3)), return_trace=True)
    assert len(trace.pre) == len(trace.inputs) == p.depth == 3


# ---- forward_mixed_hidden

def test_mixed_hidden_identity_cases():
    p = init_params(ModelSpec(4, (8,), 2), 3)
    rng = np.random.default_rng(0)
    xi, xj = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    np.testing.assert_allclose(forward_mixed_hidden(p, xi, xj, np.ones(6)), forward(p, xi), atol=1e-12)
    np.testing.assert_allclose(forward_mixed_hidden(p, xi, xj, np.zeros(6)), forward(p, xj), atol=1e-12)


def test_mixed_hidden_linear_regime():
    # positive weights and inputs keep every ReLU active, so the net is affine
    w1 = np.array([[1.0, 2.0], [0.5, 1.0]])
    w2 = np.array([[1.0], [3.0]])
    p = Params.from_arrays([w1, w2], [np.array([0.1, 0.2]), np.array([0.5])])
    xi, xj = np.array([1.0, 2.0]), np.array([3.0, 0.5])
    for lam in (0.2, 0.5, 0.9):
        expect = lam * forward(p, xi) + (1 - lam) * forward(p, xj)
        np.testing.assert_allclose(forward_mixed_hidden(p, xi, xj, lam), expect, rtol=1e-12)


def test_mixed_hidden_rejects_bad_layer_and_lambda():
    p = init_params(ModelSpec(2, (3,), 1), 0)
    with pytest.raises(ValueError):
        forward_mixed_hidden(p, np.ones(2), np.ones(2), 0.5, mix_layer=1)
    with pytest.raises(ValueError):
        forward_mixed_hidden(p, np.ones(2), np.ones(2), 1.5)


# ---- per_sample_losses

def test_per_sample_losses_examples():
    net = tiny_net(1, 0, 1, 0)
    assert np.all(per_sample_losses(net, np.array([[1.0], [2.0]]), np.array([[1.0], [2.0]])) == 0)
    assert per_sample_losses(tiny_net(0, 0, 0, 2), np.array([[5.0]]), np.array([[0.0]]))[0] == pytest.approx(4.0)
    two = Params.from_arrays([np.zeros((1, 1)), np.zeros((1, 2))], [np.zeros(1), np.ones(2)])
    assert per_sample_losses(two, np.array([[0.0]]), np.array([[0.0, 0.0]]))[0] == pytest.approx(1.0)


def test_per_sample_losses_shape_mismatch():
    p = init_params(ModelSpec(2, (3,), 2), 0)
    with pytest.raises(ValueError):
        per_sample_losses(p, np.ones((4, 2)), np.ones((4, 3)))


# ---- gradients and Adam

def test_gradient_matches_finite_differences_3_4_2():
    p = init_params(ModelSpec(3, (4,), 2), 7)
    rng = np.random.default_rng(1)
    b = Batch(rng.normal(size=(6, 3)), rng.normal(size=(6, 2)))
    _, g = loss_and_grads(p, b)
    assert max_rel_error(g.flat, numeric_grad(p, b)) < 1e-4


def test_gradient_matches_finite_differences_manifold():
    p = init_params(ModelSpec(3, (5, 4), 2), 2)
    rng = np.random.default_rng(4)
    for layer in (0, 1):
        b = HiddenMixBatch(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), rng.uniform(size=5),
                           rng.normal(size=(5, 2)), layer)
        _, g = loss_and_grads(p, b)
        assert max_rel_error(g.flat, numeric_grad(p, b)) < 1e-4


def test_zero_gradient_batch_leaves_params():
    p = init_params(ModelSpec(3, (4,), 1), 0)
    x = np.random.default_rng(0).normal(size=(5, 3))
    state = TrainState.create(p, lr=0.1)
    new = grad_and_step(state, Batch(x, forward(p, x)))
    assert np.array_equal(new.params.flat, p.flat)
    assert new.adam.t == 1


def test_adam_first_step_is_signed_lr():
    p = init_params(ModelSpec(2, (3,), 1), 0)
    state = TrainState.create(p, lr=0.01)
    g = np.where(np.arange(p.flat.size) % 2 == 0, 0.3, -2.0)
    new = adam_update(state, p.with_flat(g))
    np.testing.assert_allclose(new.params.flat - p.flat, -0.01 * np.sign(g), rtol=1e-6)


def test_step_does_not_mutate_input_state():
    p = init_params(ModelSpec(3, (4,), 1), 0)
    state = TrainState.create(p)
    before = p.fingerprint()
    rng = np.random.default_rng(0)
    grad_and_step(state, Batch(rng.normal(size=(4, 3)), rng.normal(size=(4, 1))))
    assert state.params.fingerprint() == before and state.adam.t == 0


def test_non_finite_loss_raises():
    p = init_params(ModelSpec(1, (2,), 1), 0)
    with pytest.raises(NonFiniteLossError, match="non-finite"):
        grad_and_step(TrainState.create(p), Batch(np.ones((2, 1)), np.array([[np.nan], [0.0]])))


def test_empty_batch_raises():
    p = init_params(ModelSpec(1, (2,), 1), 0)
    with pytest.raises(ValueError):
        grad_and_step(TrainState.create(p), Batch(np.zeros((0, 1)), np.zeros((0, 1))))


# ---- train_epoch

class RecordingBatch(Batch):
    seen: list

    def take(self, idx):
        self.seen.append(np.asarray(idx).copy())
        return Batch(self.x[idx], self.y[idx])


def test_train_epoch_partitions_samples():
    rng = np.random.default_rng(0)
    data = RecordingBatch(rng.normal(size=(23, 2)), rng.normal(size=(23, 1)))
    object.__setattr__(data, "seen", [])
    train_epoch(TrainState.create(init_params(ModelSpec(2, (3,), 1), 0)), data, 5, np.random.default_rng(1))
    sizes = [len(s) for s in data.seen]
    assert sizes == [5, 5, 5, 5, 3]
    assert sorted(np.concatenate(data.seen).tolist()) == list(range(23))


def test_train_epoch_deterministic():
    rng = np.random.default_rng(0)
    data = Batch(rng.normal(size=(30, 2)), rng.normal(size=(30, 1)))
    state = TrainState.create(init_params(ModelSpec(2, (8,), 1), 0))
    a = train_epoch(state, data, 8, np.random.default_rng(5))
    b = train_epoch(state, data, 8, np.random.default_rng(5))
    assert a.params.fingerprint() == b.params.fingerprint()


def test_train_epoch_reduces_loss_on_linear_data():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 3))
    y = x @ np.array([[1.0], [-2.0], [0.5]]) + 0.3
    state = TrainState.create(init_params(ModelSpec(3, (16,), 1), 0), lr=1e-2)
    start = per_sample_losses(state.params, x, y).mean()
    for ep in range(50):
        state = train_epoch(state, Batch(x, y), 16, np.random.default_rng(ep))
    assert per_sample_losses(state.params, x, y).mean() < 0.1 * start


# ---- properties

@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12), e=st.integers(1, 3))
def test_per_sample_losses_permutation_equivariant(seed, n, e):
    rng = np.random.default_rng(seed)
    p = init_params(ModelSpec(3, (5,), e), seed)
    x, y = rng.normal(size=(n, 3)), rng.normal(size=(n, e))
    perm = rng.permutation(n)
    np.testing.assert_array_equal(per_sample_losses(p, x, y)[perm], per_sample_losses(p, x[perm], y[perm]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), width=st.integers(1, 6))
def test_mixed_hidden_endpoints_match_forward(seed, width):
    rng = np.random.default_rng(seed)
    p = init_params(ModelSpec(2, (width, 3), 1), seed)
    xi, xj = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    for layer in (0, 1):
        np.testing.assert_allclose(forward_mixed_hidden(p, xi, xj, np.ones(4), layer), forward(p, xi), atol=1e-12)
        np.testing.assert_allclose(forward_mixed_hidden(p, xi, xj, np.zeros(4), layer), forward(p, xj), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gradient_random_nets(seed):
    rng = np.random.default_rng(seed)
    dims = tuple(int(h) for h in rng.integers(1, 6, size=rng.integers(1, 3)))
    spec = ModelSpec(int(rng.integers(1, 5)), dims, int(rng.integers(1, 3)))
    p, b = random_point(spec, rng, int(rng.integers(1, 6)))
    _, g = loss_and_grads(p, b)
    assert max_rel_error(g.flat, numeric_grad(p, b)) < 1e-4


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_operations_are_pure(seed):
    rng = np.random.default_rng(seed)
    p = init_params(ModelSpec(3, (4,), 2), seed)
    b = Batch(rng.normal(size=(5, 3)), rng.normal(size=(5, 2)))
    l1, g1 = loss_and_grads(p, b)
    l2, g2 = loss_and_grads(p, b)
    assert l1 == l2 and np.array_equal(g1.flat, g2.flat)
