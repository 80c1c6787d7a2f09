"""Clean-sample selection back-ends: ITLM, O2U-Net ranking, SELFIE refurbishment."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .nncore import Batch, TrainState, per_sample_losses, train_epoch


def clean_count(tau: float, n: int) -> int:
    # the epsilon keeps e.g. 0.7 * 1000 from flooring to 699
    return int(np.floor(tau * n + 1e-9))


@dataclass(frozen=True)
class CleanSelection:
    indices: np.ndarray  # sorted ascending
    tau: float
    losses: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.indices)

    def to_json(self) -> str:
        return json.dumps({"tau": self.tau, "indices": [int(i) for i in self.indices]})


def itlm_select(losses, tau: float) -> CleanSelection:
    """Keep the floor(tau * n) lowest-loss samples (stable sort, ties to the lower index)."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("empty loss vector")
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    keep = np.argsort(losses, kind="stable")[:clean_count(tau, losses.size)]
    return CleanSelection(np.sort(keep), tau, losses)


@dataclass(frozen=True)
class O2UConfig:
    cycle_length: int = 10
    n_cycles: int = 3
    lr_max: float = 1e-2
    lr_min: float = 1e-4
    pretrain_rounds: Optional[int] = None  # None -> the pipeline's warm-up length

    def __post_init__(self):
        if self.cycle_length < 2:
            raise ValueError("cycle_length must be >= 2")
        if self.n_cycles < 1:
            raise ValueError("n_cycles must be >= 1")
        if not self.lr_max > self.lr_min > 0:
            raise ValueError("need lr_max > lr_min > 0")


def o2u_lr(config: O2UConfig, epoch: int) -> float:
    """Linear decay from lr_max to lr_min inside each cycle, restarting every cycle."""
    pos = epoch % config.cycle_length
    frac = pos / (config.cycle_length - 1)
    return config.lr_max - (config.lr_max - config.lr_min) * frac


def o2u_rank(state: TrainState, X, Y, config: O2UConfig, tau: float, rng: np.random.Generator,
             batch_size: int = 32) -> CleanSelection:
    """Cyclical-lr phase on the full data; samples with the largest mean loss are dropped.

    The input state is left untouched: the cyclic phase only serves ranking.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64).reshape(len(X), -1)
    n = len(X)
    data = Batch(X, Y)
    total = np.zeros(n)
    epochs = config.cycle_length * config.n_cycles
    for ep in range(epochs):
        state = train_epoch(state, data, batch_size, rng, lr=o2u_lr(config, ep))
        total += per_sample_losses(state.params, X, Y)
    mean_loss = total / epochs
    n_drop = n - clean_count(tau, n)
    # descending by loss, ties resolved towards the lower index
    ranked = np.lexsort((np.arange(n), -mean_loss))
    keep = np.sort(ranked[n_drop:])
    return CleanSelection(keep, tau, mean_loss)


@dataclass(frozen=True)
class SelfieState:
    labels: np.ndarray  # the (noisy) labels refurbishment starts from
    history: np.ndarray  # (n, q, e) ring buffer of predictions
    count: int = 0  # pushes so far; all samples are pushed together
    threshold: Optional[float] = None  # fixed variance threshold, or None for the percentile rule
    percentile: float = 25.0
    overlay: Optional[np.ndarray] = None  # labels after the latest refurbishment
    refurbished: Optional[np.ndarray] = None  # indices refurbished at the latest step

    @classmethod
    def create(cls, labels, q: int = 5, threshold: Optional[float] = None,
               percentile: float = 25.0) -> "SelfieState":
        labels = np.asarray(labels, dtype=np.float64)
        if labels.ndim == 1:
            labels = labels[:, None]
        if q < 1:
            raise ValueError("history length q must be >= 1")
        n, e = labels.shape
        return cls(labels, np.zeros((n, q, e)), 0, threshold, percentile,
                   labels.copy(), np.zeros(0, dtype=int))

    @property
    def q(self) -> int:
        return self.history.shape[1]

    @property
    def stored(self) -> int:
        return min(self.count, self.q)

    def push(self, predictions) -> "SelfieState":
        preds = np.asarray(predictions, dtype=np.float64).reshape(self.labels.shape)
        hist = self.history.copy()
        hist[:, self.count % self.q] = preds
        return replace(self, history=hist, count=self.count + 1)

    def prediction_stats(self) -> tuple:
        """Per-sample mean prediction (n, e) and variance (mean over dims, divisor q)."""
        h = self.history[:, :self.stored]
        return h.mean(axis=1), h.var(axis=1).mean(axis=1)


@dataclass(frozen=True)
class RefurbishedView:
    indices: np.ndarray  # training rows: clean core plus refurbished samples
    labels: np.ndarray  # full (n, e) labels with the overlay applied
    refurbished: np.ndarray


def selfie_step(state: SelfieState, predictions, losses, tau: float) -> tuple:
    losses = np.asarray(losses, dtype=np.float64)
    preds = np.asarray(predictions, dtype=np.float64)
    n, e = state.labels.shape
    if preds.reshape(len(preds), -1).shape != (n, e) or losses.shape != (n,):
        raise ValueError(f"expected predictions ({n}, {e}) and losses ({n},), "
                         f"got {preds.shape} and {losses.shape}")
    state = state.push(preds)
    core = itlm_select(losses, tau)
    mean, var = state.prediction_stats()
    if state.count < state.q:
        refurb = np.zeros(0, dtype=int)
        threshold = state.threshold
    else:
        threshold = state.threshold
        if threshold is None:
            threshold = float(np.percentile(var, state.percentile))
        outside = np.setdiff1d(np.arange(n), core.indices)
        refurb = outside[var[outside] <= threshold]
    overlay = state.labels.copy()
    overlay[refurb] = mean[refurb]
    state = replace(state, overlay=overlay, refurbished=refurb)
    view = RefurbishedView(np.union1d(core.indices, refurb), overlay, refurb)
    return state, core, view


def detection_accuracy(selection: CleanSelection, record) -> Optional[float]:
    """Percent of corrupted samples left out of the clean set; None without corruption."""
    corrupted = np.asarray(record.indices, dtype=int)
    if corrupted.size == 0:
        return None
    excluded = ~np.isin(corrupted, selection.indices)
    return 100.0 * float(excluded.sum()) / corrupted.size
