"""RMSE / MAPE and multi-seed aggregation.

Both metrics flatten multi-dimensional labels and average over all n*e
entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAPE_EPS = 1e-8


def _pair(Y, Y_hat):
    Y = np.asarray(Y, dtype=np.float64)
    Y_hat = np.asarray(Y_hat, dtype=np.float64)
    if Y.shape != Y_hat.shape:
        raise ValueError(f"shape mismatch: {Y.shape} vs {Y_hat.shape}")
    if Y.size == 0:
        raise ValueError("no entries to evaluate")
    return Y, Y_hat


def rmse(Y, Y_hat) -> float:
    Y, Y_hat = _pair(Y, Y_hat)
    return float(np.sqrt(np.mean((Y - Y_hat) ** 2)))


def mape(Y, Y_hat) -> float:
    Y, Y_hat = _pair(Y, Y_hat)
    return float(np.mean(np.abs(Y - Y_hat) / np.maximum(np.abs(Y), MAPE_EPS)) * 100.0)


@dataclass(frozen=True)
class MetricResult:
    rmse: float
    mape: float
    n: int

    def to_json(self) -> dict:
        return {"rmse": self.rmse, "mape": self.mape, "n": self.n}


def evaluate(Y, Y_hat) -> MetricResult:
    Y = np.asarray(Y, dtype=np.float64)
    return MetricResult(rmse(Y, Y_hat), mape(Y, Y_hat), len(Y))


@dataclass(frozen=True)
class SeedAggregate:
    results: tuple
    rmse_mean: float
    rmse_std: float
    mape_mean: float
    mape_std: float

    @property
    def count(self) -> int:
        return len(self.results)

    def to_json(self) -> dict:
        return {
            "count": self.count,
            "rmse_mean": self.rmse_mean,
            "rmse_std": self.rmse_std,
            "mape_mean": self.mape_mean,
            "mape_std": self.mape_std,
        }


def mean_std(values: Sequence[float]) -> tuple:
    """Arithmetic mean and sample (k-1) standard deviation; std is 0 for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("need at least one value")
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), std


def aggregate_seeds(results: Sequence[MetricResult]) -> SeedAggregate:
    if not results:
        raise ValueError("need at least one result")
    # sorting makes the float sums independent of input order
    r_mean, r_std = mean_std(sorted(r.rmse for r in results))
    m_mean, m_std = mean_std(sorted(r.mape for r in results))
    return SeedAggregate(tuple(results), r_mean, r_std, m_mean, m_std)
