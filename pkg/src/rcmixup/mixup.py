"""Label-distance kernel sampling and mixing (C-Mixup).

Partners are drawn with probability proportional to exp(-d(y_i, y_j) / b^2)
over an active index set, so cleaning only has to change the active set;
the distance matrix itself is computed once per training set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .nncore import Batch, HiddenMixBatch


# rows whose largest kernel weight falls below this are recomputed with a max-shift
_UNDERFLOW = 1e-250


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    D: np.ndarray
    squared: bool = True
    _kernels: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.D.shape[0]

    def kernel(self, bandwidth: float) -> np.ndarray:
        """exp(-D / b^2) over all pairs, cached per bandwidth (a handful at most)."""
        K = self._kernels.get(bandwidth)
        if K is None:
            if len(self._kernels) >= 8:
                self._kernels.pop(next(iter(self._kernels)))
            K = np.exp(-self.D / bandwidth ** 2)
            self._kernels[bandwidth] = K
        return K


@dataclass(frozen=True, eq=False)
class KernelSampler:
    dist: DistanceMatrix
    bandwidth: float
    active: np.ndarray  # sorted ascending source indices
    weights: np.ndarray  # (|A|, |A|) unnormalized kernel, zero on the diagonal
    cum: np.ndarray  # row-wise cumulative weights

    @property
    def totals(self) -> np.ndarray:
        return self.cum[:, -1]

    @property
    def probs(self) -> np.ndarray:
        """Row r is the partner distribution of anchor ``active[r]``."""
        return self.weights / self.totals[:, None]

    def row_of(self, i: int) -> int:
        r = int(np.searchsorted(self.active, i))
        if r >= len(self.active) or self.active[r] != i:
            raise KeyError(f"anchor {i} is not in the active set")
        return r

    def row(self, i: int) -> np.ndarray:
        """Full-length (n) probability vector for anchor ``i``."""
        r = self.row_of(i)
        out = np.zeros(self.dist.n)
        out[self.active] = self.weights[r] / self.totals[r]
        return out


@dataclass(frozen=True)
class MixConfig:
    alpha: float = 2.0
    mode: str = "input_mixup"  # or "manifold_mixup"
    mix_layer: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.mode not in ("input_mixup", "manifold_mixup"):
            raise ValueError(f"unknown mix mode {self.mode!r}")


@dataclass(frozen=True)
class MixedSample:
    x: np.ndarray
    y: np.ndarray
    pair: tuple
    lam: float


@dataclass(frozen=True)
class MixedSet:
    """One epoch's worth of mixing: anchors, partners, lambdas and mixed targets."""

    anchors: np.ndarray
    partners: np.ndarray
    lam: np.ndarray
    y: np.ndarray
    x: Optional[np.ndarray]  # None in manifold mode
    config: MixConfig

    def __len__(self):
        return len(self.anchors)

    def training_samples(self, X: np.ndarray):
        """Samples for ``nncore.train_epoch``; X must be the (scaled) source feature matrix."""
        if self.config.mode == "manifold_mixup":
            return HiddenMixBatch(X[self.anchors], X[self.partners], self.lam, self.y, self.config.mix_layer)
        return Batch(self.x, self.y)


def build_label_distances(Y, squared: bool = True) -> DistanceMatrix:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if len(Y) < 2:
        raise ValueError("need at least two labels")
    if Y.shape[1] == 1:
        D = (Y[:, 0][:, None] - Y[:, 0][None, :]) ** 2
    else:
        # Gram form avoids an (n, n, e) temporary; clip the rounding negatives
        sq = np.sum(Y * Y, axis=1)
        D = np.maximum(sq[:, None] + sq[None, :] - 2.0 * Y @ Y.T, 0.0)
    np.fill_diagonal(D, 0.0)
    D = 0.5 * (D + D.T)
    if not squared:
        D = np.sqrt(D)
    return DistanceMatrix(D, squared)


def sampling_probs(dist: DistanceMatrix, bandwidth: float, active=None) -> KernelSampler:
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    active = np.arange(dist.n) if active is None else np.unique(np.asarray(active, dtype=int))
    if len(active) < 2:
        raise ValueError("the active set needs at least two samples")
    full = len(active) == dist.n
    K = dist.kernel(bandwidth)
    W = K.copy() if full else K[np.ix_(active, active)]
    np.fill_diagonal(W, 0.0)
    low = W.max(axis=1) < _UNDERFLOW
    if np.any(low):
        sub = dist.D[np.ix_(active[low], active)]
        logits = -sub / bandwidth ** 2
        logits[np.arange(len(sub)), np.flatnonzero(low)] = -np.inf
        W[low] = np.exp(logits - logits.max(axis=1, keepdims=True))
    return KernelSampler(dist, float(bandwidth), active, W, np.cumsum(W, axis=1))


def _draw(sampler: KernelSampler, rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = sampler.cum[rows]
    cols = (cum <= (u * cum[:, -1])[:, None]).sum(axis=1)
    # u * total can round up to the total; fall back to the last column with mass
    over = cols >= cum.shape[1]
    if np.any(over):
        w = sampler.weights[rows[over]]
        cols[over] = w.shape[1] - 1 - np.argmax(w[:, ::-1] > 0, axis=1)
    return sampler.active[cols]


def sample_partner(sampler: KernelSampler, i: int, rng: np.random.Generator) -> int:
    r = sampler.row_of(i)
    return int(_draw(sampler, np.array([r]), rng.random(1))[0])


def mix_pair(x_i, y_i, x_j, y_j, lam: float, pair: tuple = (None, None)) -> MixedSample:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    x_i, x_j = np.asarray(x_i, float), np.asarray(x_j, float)
    y_i, y_j = np.asarray(y_i, float), np.asarray(y_j, float)
    return MixedSample(lam * x_i + (1 - lam) * x_j, lam * y_i + (1 - lam) * y_j, pair, float(lam))


def cmixup_epoch(X, Y, sampler: KernelSampler, config: MixConfig, rng: np.random.Generator,
                 subset=None) -> MixedSet:
    """Mix every anchor of the active set once with a kernel-sampled partner.

    ``X``/``Y`` are the full source arrays (rows indexed like the distance
    matrix); ``Y`` may carry refurbished labels.  ``subset`` is the index
    set the caller believes is active and must match the sampler.
    """
    if subset is not None and not np.array_equal(np.unique(np.asarray(subset, dtype=int)), sampler.active):
        raise ValueError("subset does not match the sampler's active set")
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64).reshape(len(X), -1)
    anchors = sampler.active
    m = len(anchors)
    partners = _draw(sampler, np.arange(m), rng.random(m))
    lam = rng.beta(config.alpha, config.alpha, size=m)
    lc = lam[:, None]
    y_mix = lc * Y[anchors] + (1 - lc) * Y[partners]
    x_mix = None
    if config.mode == "input_mixup":
        x_mix = lc * X[anchors] + (1 - lc) * X[partners]
    return MixedSet(anchors, partners, lam, y_mix, x_mix, config)
