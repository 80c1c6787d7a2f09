"""Small feed-forward regression network written directly in numpy.

Exact reverse-mode gradients, Adam updates, per-sample MSE losses and a
hidden-layer mixing path for Manifold Mixup.  Every operation returns new
arrays, so a ``TrainState`` can be kept as a snapshot and reused later.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np


class NonFiniteLossError(FloatingPointError):
    """Raised when a training step produces a NaN/inf loss or gradient."""


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple = (128,)
    output_dim: int = 1
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer widths must be >= 1, got {dims}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> tuple:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def depth(self) -> int:
        """Number of weight layers."""
        return len(self.hidden_dims) + 1


@lru_cache(maxsize=None)
def _layout(dims: tuple) -> tuple:
    """Slice bounds of every weight matrix and bias vector inside the flat vector."""
    wsl, bsl, pos = [], [], 0
    for a, b in zip(dims[:-1], dims[1:]):
        wsl.append((pos, pos + a * b, (a, b)))
        pos += a * b
    for b in dims[1:]:
        bsl.append((pos, pos + b))
        pos += b
    return tuple(wsl), tuple(bsl), pos


@dataclass(frozen=True, eq=False)
class Params:
    """All weights and biases in one flat vector; ``weights``/``biases`` are views into it."""

    flat: np.ndarray
    layer_dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        wsl, bsl, total = _layout(dims)
        if self.flat.shape != (total,):
            raise ValueError(f"flat parameter vector has shape {self.flat.shape}, expected ({total},)")
        f = self.flat
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", tuple(f[a:b].reshape(shape) for a, b, shape in wsl))
        object.__setattr__(self, "biases", tuple(f[a:b] for a, b in bsl))

    def arrays(self) -> list:
        return [*self.weights, *self.biases]

    @classmethod
    def from_arrays(cls, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> "Params":
        dims = (weights[0].shape[0], *(w.shape[1] for w in weights))
        flat = np.concatenate([np.ravel(a) for a in (*weights, *biases)]).astype(np.float64)
        return cls(flat, dims)

    def with_flat(self, flat: np.ndarray) -> "Params":
        return Params(flat, self.layer_dims)

    def zeros_like(self) -> "Params":
        return self.with_flat(np.zeros_like(self.flat))

    @property
    def depth(self) -> int:
        return len(self.layer_dims) - 1

    def fingerprint(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.flat).tobytes()).hexdigest()


@dataclass(frozen=True)
class AdamState:
    m: Params
    v: Params
    t: int = 0
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainState:
    params: Params
    adam: AdamState

    @classmethod
    def create(cls, params: Params, lr: float = 1e-2, **adam_kwargs) -> "TrainState":
        zeros = params.zeros_like()
        return cls(params, AdamState(m=zeros, v=zeros, lr=lr, **adam_kwargs))


@dataclass
class ForwardTrace:
    """Inputs to every layer (``inputs[0]`` is x) and pre-activations."""

    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)


@dataclass(frozen=True)
class Batch:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.x)

    def take(self, idx) -> "Batch":
        return Batch(self.x[idx], self.y[idx])


@dataclass(frozen=True)
class HiddenMixBatch:
    """Pairs to be blended at the post-activation of hidden layer ``layer``."""

    x_a: np.ndarray
    x_b: np.ndarray
    lam: np.ndarray
    y: np.ndarray
    layer: int = 0

    def __len__(self):
        return len(self.x_a)

    def take(self, idx) -> "HiddenMixBatch":
        return HiddenMixBatch(self.x_a[idx], self.x_b[idx], self.lam[idx], self.y[idx], self.layer)


Samples = Union[Batch, HiddenMixBatch]


def init_params(spec: ModelSpec, seed: int) -> Params:
    """He-uniform weights (bound sqrt(6/fan_in), sqrt(3/fan_in) on the output layer), zero biases."""
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        gain = 3.0 if k == len(dims) - 2 else 6.0
        bound = np.sqrt(gain / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Params.from_arrays(weights, biases)


def _as_batch(params: Params, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"input has shape {x.shape}, expected (*, {params.weights[0].shape[0]})"
        )
    return x, single


def _forward_range(params: Params, a: np.ndarray, start: int, stop: int, trace: Optional[ForwardTrace]):
    last = params.depth - 1
    for k in range(start, stop):
        z = a @ params.weights[k] + params.biases[k]
        if trace is not None:
            trace.inputs.append(a)
            trace.pre.append(z)
        a = np.maximum(z, 0.0) if k < last else z
    return a


def _backward_range(params: Params, trace: ForwardTrace, g: np.ndarray, start: int, stop: int,
                    gw: list, gb: list) -> np.ndarray:
    # trace holds layers start..stop-1 at positions 0..stop-start-1
    last = params.depth - 1
    for pos, k in reversed(list(enumerate(range(start, stop)))):
        dz = g * (trace.pre[pos] > 0) if k < last else g
        gw[k] += trace.inputs[pos].T @ dz
        gb[k] += dz.sum(axis=0)
        g = dz @ params.weights[k].T
    return g


def forward(params: Params, x, return_trace: bool = False):
    xb, single = _as_batch(params, x)
    trace = ForwardTrace() if return_trace else None
    out = _forward_range(params, xb, 0, params.depth, trace)
    if single:
        out = out[0]
    return (out, trace) if return_trace else out


def _check_mix_layer(params: Params, layer: int):
    if not 0 <= layer < params.depth - 1:
        raise ValueError(f"mix_layer must index a hidden layer in [0, {params.depth - 1}), got {layer}")


def forward_mixed_hidden(params: Params, x_i, x_j, lam, mix_layer: int = 0):
    """Blend hidden activations lam*h(x_i) + (1-lam)*h(x_j) and finish the forward pass."""
    _check_mix_layer(params, mix_layer)
    xa, single = _as_batch(params, x_i)
    xb, _ = _as_batch(params, x_j)
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    if np.any((lam < 0) | (lam > 1)):
        raise ValueError("lambda must lie in [0, 1]")
    ha = _forward_range(params, xa, 0, mix_layer + 1, None)
    hb = _forward_range(params, xb, 0, mix_layer + 1, None)
    h = lam[:, None] * ha + (1.0 - lam[:, None]) * hb
    out = _forward_range(params, h, mix_layer + 1, params.depth, None)
    return out[0] if single else out


def per_sample_losses(params: Params, x, y) -> np.ndarray:
    """Squared error averaged over output dimensions, one value per row."""
    pred = forward(params, np.atleast_2d(x))
    y = np.asarray(y, dtype=np.float64).reshape(pred.shape[0], -1)
    if y.shape != pred.shape:
        raise ValueError(f"labels have shape {y.shape}, predictions {pred.shape}")
    return np.mean((pred - y) ** 2, axis=1)


def loss_and_grads(params: Params, batch: Samples) -> tuple[float, Params]:
    """Mean batch MSE and its exact gradient with respect to every parameter."""
    grads = params.zeros_like()
    gw, gb = list(grads.weights), list(grads.biases)
    depth = params.depth

    if isinstance(batch, HiddenMixBatch):
        layer = batch.layer
        _check_mix_layer(params, layer)
        ta, tb, tt = ForwardTrace(), ForwardTrace(), ForwardTrace()
        ha = _forward_range(params, np.asarray(batch.x_a, float), 0, layer + 1, ta)
        hb = _forward_range(params, np.asarray(batch.x_b, float), 0, layer + 1, tb)
        lam = np.asarray(batch.lam, float)[:, None]
        h = lam * ha + (1.0 - lam) * hb
        out = _forward_range(params, h, layer + 1, depth, tt)
    else:
        tt = ForwardTrace()
        out = _forward_range(params, np.asarray(batch.x, float), 0, depth, tt)

    resid = out - batch.y
    loss = float(np.mean(resid ** 2))
    g = 2.0 * resid / resid.size

    if isinstance(batch, HiddenMixBatch):
        gh = _backward_range(params, tt, g, layer + 1, depth, gw, gb)
        _backward_range(params, ta, lam * gh, 0, layer + 1, gw, gb)
        _backward_range(params, tb, (1.0 - lam) * gh, 0, layer + 1, gw, gb)
    else:
        _backward_range(params, tt, g, 0, depth, gw, gb)
    return loss, grads


def adam_update(state: TrainState, grads: Params, lr: Optional[float] = None) -> TrainState:
    opt = state.adam
    lr = opt.lr if lr is None else lr
    t = opt.t + 1
    g = grads.flat
    m = opt.beta1 * opt.m.flat + (1.0 - opt.beta1) * g
    v = opt.beta2 * opt.v.flat + (1.0 - opt.beta2) * g * g
    m_hat = m / (1.0 - opt.beta1 ** t)
    v_hat = v / (1.0 - opt.beta2 ** t)
    p = state.params.flat - lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    adam = replace(opt, m=opt.m.with_flat(m), v=opt.v.with_flat(v), t=t)
    return TrainState(state.params.with_flat(p), adam)


def grad_and_step(state: TrainState, batch: Samples, lr: Optional[float] = None) -> TrainState:
    if len(batch) == 0:
        raise ValueError("empty batch")
    loss, grads = loss_and_grads(state.params, batch)
    if not (np.isfinite(loss) and np.all(np.isfinite(grads.flat))):
        raise NonFiniteLossError(
            f"non-finite loss/gradient at Adam step {state.adam.t + 1} "
            f"(loss={loss}, batch size {len(batch)}); lower the learning rate or check the labels"
        )
    return adam_update(state, grads, lr)


def train_epoch(state: TrainState, samples: Samples, batch_size: int, rng: np.random.Generator,
                lr: Optional[float] = None) -> TrainState:
    """One shuffled pass over ``samples``; the last mini-batch may be short."""
    n = len(samples)
    if n == 0:
        raise ValueError("no samples to train on")
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        state = grad_and_step(state, samples.take(order[start:start + batch_size]), lr)
    return state


def predict(params: Params, x) -> np.ndarray:
    return forward(params, np.atleast_2d(x))
