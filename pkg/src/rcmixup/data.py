"""Datasets, splits, synthetic targets and label-noise injection."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    feature_names: Optional[tuple] = None
    origin: str = ""
    indices: Optional[np.ndarray] = None  # row ids in the source dataset, set by split_dataset

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        Y = np.asarray(self.Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.ndim != 2 or Y.ndim != 2:
            raise ValueError("X and Y must be 2-D")
        if len(X) < 1 or len(X) != len(Y):
            raise ValueError(f"need n >= 1 rows and matching X/Y rows, got {len(X)} and {len(Y)}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return len(self.X)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def e(self) -> int:
        return self.Y.shape[1]

    def __len__(self):
        return self.n

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        src = self.indices[idx] if self.indices is not None else idx
        return replace(self, X=self.X[idx], Y=self.Y[idx], indices=src)

    def with_labels(self, Y) -> "Dataset":
        return replace(self, Y=np.asarray(Y, dtype=np.float64).reshape(self.Y.shape))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.X.tobytes())
        h.update(self.Y.tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian"
    rate: float = 0.3
    magnitude: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "label_flip"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate <= 0.5:
            raise ValueError(f"noise rate must be in [0, 0.5], got {self.rate}")
        if self.magnitude < 0:
            raise ValueError("noise magnitude must be non-negative")


@dataclass(frozen=True)
class NoiseRecord:
    indices: np.ndarray
    original: np.ndarray  # (len(indices), e)
    sigma: Optional[np.ndarray] = None
    label_max: Optional[np.ndarray] = None
    kind: str = "gaussian"

    @property
    def size(self) -> int:
        return len(self.indices)

    def restore(self, noisy: Dataset) -> Dataset:
        Y = noisy.Y.copy()
        Y[self.indices] = self.original
        return noisy.with_labels(Y)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "indices": [int(i) for i in self.indices],
            "original": self.original.tolist(),
            "sigma": None if self.sigma is None else self.sigma.tolist(),
            "label_max": None if self.label_max is None else self.label_max.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NoiseRecord":
        def arr(v):
            return None if v is None else np.asarray(v, dtype=np.float64)

        e = len(obj["original"][0]) if obj["original"] else 1
        return cls(
            indices=np.asarray(obj["indices"], dtype=int),
            original=np.asarray(obj["original"], dtype=np.float64).reshape(-1, e),
            sigma=arr(obj.get("sigma")),
            label_max=arr(obj.get("label_max")),
            kind=obj.get("kind", "gaussian"),
        )


@dataclass(frozen=True)
class SplitSpec:
    n_train: int
    n_val: int
    n_test: Optional[int] = None  # None -> everything left over
    seed: int = 0


def load_csv(path, label_dims: int = 1) -> Dataset:
    """Read a headered numeric CSV; the trailing ``label_dims`` columns are labels."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        ncol = len(header)
        if not 1 <= label_dims < ncol:
            raise DataFormatError(f"label_dims={label_dims} out of range for {ncol} columns")
        rows = []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != ncol:
                raise DataFormatError(f"{path}: row {r} has {len(row)} cells, expected {ncol}")
            vals = []
            for c, cell in enumerate(row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataFormatError(
                        f"{path}: row {r}, column {c + 1} ({header[c]!r}): non-numeric cell {cell!r}"
                    ) from None
            rows.append(vals)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    arr = np.asarray(rows)
    return Dataset(arr[:, :-label_dims], arr[:, -label_dims:],
                   feature_names=tuple(header[:-label_dims]), origin=str(path))


def load_whitespace_table(path, label_dims: int = 1) -> Dataset:
    """Headerless whitespace/tab separated table (e.g. the UCI airfoil ``.dat`` file)."""
    arr = np.loadtxt(path, ndmin=2)
    return Dataset(arr[:, :-label_dims], arr[:, -label_dims:], origin=str(path))


def window_timeseries(series, window: int, horizon: int) -> Dataset:
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        series = series[:, None]
    T, c = series.shape
    if window < 1 or horizon < 1:
        raise ValueError("window and horizon must be >= 1")
    if T < window + horizon:
        raise ValueError(f"series of length {T} too short for window={window}, horizon={horizon}")
    count = T - window - horizon + 1
    X = np.stack([series[t:t + window].reshape(-1) for t in range(count)])
    Y = series[window + horizon - 1: window + horizon - 1 + count]
    return Dataset(X, Y, origin=f"window({window},{horizon})")


def split_dataset(dataset: Dataset, spec: SplitSpec) -> tuple:
    n = dataset.n
    n_test = n - spec.n_train - spec.n_val if spec.n_test is None else spec.n_test
    if min(spec.n_train, spec.n_val, n_test) < 0 or spec.n_train + spec.n_val + n_test > n:
        raise ValueError(
            f"split sizes {spec.n_train}+{spec.n_val}+{n_test} exceed dataset size {n}"
        )
    order = np.random.default_rng(spec.seed).permutation(n)
    a, b = spec.n_train, spec.n_train + spec.n_val
    return (dataset.subset(order[:a]), dataset.subset(order[a:b]),
            dataset.subset(order[b:b + n_test]))


def _noisy_rows(n: int, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    k = int(np.floor(spec.rate * n + 1e-9))
    return np.sort(rng.choice(n, size=k, replace=False))


def inject_gaussian_noise(train: Dataset, spec: NoiseSpec) -> tuple:
    if spec.kind != "gaussian":
        raise ValueError("spec.kind must be 'gaussian'")
    rng = np.random.default_rng(spec.seed)
    sigma = train.Y.std(axis=0)
    rows = _noisy_rows(train.n, spec, rng)
    Y = train.Y.copy()
    Y[rows] += rng.normal(0.0, 1.0, size=(len(rows), train.e)) * (spec.magnitude * sigma)
    record = NoiseRecord(rows, train.Y[rows].copy(), sigma=sigma, kind="gaussian")
    return train.with_labels(Y), record


def inject_label_flip(train: Dataset, spec: NoiseSpec) -> tuple:
    if spec.kind != "label_flip":
        raise ValueError("spec.kind must be 'label_flip'")
    rng = np.random.default_rng(spec.seed)
    label_max = train.Y.max(axis=0)
    rows = _noisy_rows(train.n, spec, rng)
    Y = train.Y.copy()
    Y[rows] = label_max - Y[rows]
    record = NoiseRecord(rows, train.Y[rows].copy(), label_max=label_max, kind="label_flip")
    return train.with_labels(Y), record


def inject_noise(train: Dataset, spec: NoiseSpec) -> tuple:
    if spec.kind == "gaussian":
        return inject_gaussian_noise(train, spec)
    return inject_label_flip(train, spec)


def save_noisy(dataset: Dataset, record: NoiseRecord, csv_path, record_path) -> None:
    e = dataset.e
    names = list(dataset.feature_names or [f"x{k}" for k in range(dataset.d)])
    header = names + [f"y{k}" for k in range(e)]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, y in zip(dataset.X, dataset.Y):
            w.writerow([repr(float(v)) for v in (*x, *y)])
    Path(record_path).write_text(json.dumps(record.to_json(), indent=1))


@dataclass(frozen=True)
class TargetSpec:
    """Fixed random linear map plus a sinusoidal term; parameters drawn from the dataset seed."""

    linear_weight: float = 1.0
    sin_weight: float = 1.0
    frequency: float = 2.0
    scale: float = 1.0
    offset: float = 0.0


@dataclass(frozen=True)
class SyntheticTarget:
    spec: TargetSpec
    A: np.ndarray
    B: np.ndarray
    phase: np.ndarray

    def __call__(self, X) -> np.ndarray:
        s = self.spec
        X = np.asarray(X, dtype=np.float64)
        lin = X @ self.A
        wave = np.sin(s.frequency * (X @ self.B) + self.phase)
        return s.offset + s.scale * (s.linear_weight * lin + s.sin_weight * wave)


def make_target(d: int, e: int, spec: TargetSpec = TargetSpec(), seed: int = 0) -> SyntheticTarget:
    rng = np.random.default_rng([seed, 7919])
    A = rng.normal(size=(d, e)) / np.sqrt(d)
    B = rng.normal(size=(d, e)) / np.sqrt(d)
    phase = rng.uniform(0, 2 * np.pi, size=e)
    return SyntheticTarget(spec, A, B, phase)


def synth_regression(n: int, d: int, e: int = 1, target: TargetSpec = TargetSpec(), seed: int = 0) -> Dataset:
    if min(n, d, e) < 1:
        raise ValueError("n, d, e must be >= 1")
    fn = make_target(d, e, target, seed)
    X = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(n, d))
    return Dataset(X, fn(X), origin=f"synthetic(n={n},d={d},e={e},seed={seed})")


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, A: np.ndarray) -> "Standardizer":
        A = np.asarray(A, dtype=np.float64)
        scale = A.std(axis=0)
        return cls(A.mean(axis=0), np.where(scale > 0, scale, 1.0))

    def transform(self, A):
        return (np.asarray(A, dtype=np.float64) - self.mean) / self.scale

    def inverse(self, A):
        return np.asarray(A, dtype=np.float64) * self.scale + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}


DATA_ENV = "RCMIXUP_DATA"

# file names tried in order; "label_first" marks tables whose response is column 0
_BENCHMARK_FILES = {
    "airfoil": [("airfoil_self_noise.dat", "table", False), ("airfoil.csv", "csv", False)],
    "no2": [("no2.csv", "csv", False), ("NO2.dat", "table", True), ("no2.dat", "table", True)],
    "exchange_rate": [("exchange_rate.txt", "series", False), ("exchange_rate.csv", "series", False)],
}


def data_root(root=None) -> Path:
    """Directory holding benchmark files: ``root``, else $RCMIXUP_DATA, else ./data."""
    return Path(root or os.environ.get(DATA_ENV) or "data")


def load_series(path) -> np.ndarray:
    """Comma-separated numeric series without a header, one time step per line."""
    arr = np.loadtxt(path, delimiter=",", ndmin=2)
    if not np.all(np.isfinite(arr)):
        raise DataFormatError(f"{path}: non-finite values")
    return arr


def load_benchmark(name: str, root=None, window: int = 168, horizon: int = 12) -> Dataset:
    """Load a public regression benchmark from the data directory.

    The files are not shipped; place them under ``data_root(root)``.
    """
    if name not in _BENCHMARK_FILES:
        raise ValueError(f"unknown benchmark {name!r}; expected one of {sorted(_BENCHMARK_FILES)}")
    base = data_root(root)
    for fname, kind, label_first in _BENCHMARK_FILES[name]:
        path = base / fname
        if not path.exists():
            continue
        if kind == "csv":
            ds = load_csv(path, 1)
        elif kind == "series":
            ds = window_timeseries(load_series(path), window, horizon)
        else:
            arr = np.loadtxt(path, ndmin=2)
            if label_first:
                arr = np.concatenate([arr[:, 1:], arr[:, :1]], axis=1)
            ds = Dataset(arr[:, :-1], arr[:, -1:])
        return replace(ds, origin=f"{name}:{path}")
    tried = ", ".join(str(base / f) for f, _, _ in _BENCHMARK_FILES[name])
    raise FileNotFoundError(f"benchmark {name!r} not found; looked for {tried} "
                            f"(set ${DATA_ENV} to the directory holding it)")
