"""Flat experiment configuration: strict TOML parsing, per-dataset presets, fingerprints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import tomli
import tomli_w

from .orchestrator import MODES, ROBUST_BACKENDS, RCConfig
from .robust import O2UConfig

DATASETS = ("airfoil", "no2", "exchange_rate", "spectrum_synth", "synthetic", "csv", "timeseries")
BENCHMARKS = ("airfoil", "no2", "exchange_rate")
VALIDATION_MODES = ("clean", "noisy", "cleaned_rt")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = ""
    preset: str = ""
    # data source
    dataset: str = "synthetic"
    data_path: str = ""  # csv / series file, or the benchmark directory
    label_dims: int = 1
    window: int = 168
    horizon: int = 12
    synth_n: int = 1500
    synth_d: int = 5
    synth_e: int = 1
    synth_scale: float = 7.0
    synth_offset: float = 0.0
    synth_seed: int = 0
    n_train: int = 1000
    n_val: int = 400
    n_test: Optional[int] = None
    split_seed: int = 0
    # noise
    noise_kind: str = "gaussian"
    noise_rate: float = 0.3
    noise_magnitude: float = 2.0
    validation: str = "clean"
    tau_v: Optional[float] = None  # None -> 1 - noise_rate
    # pipeline
    mode: str = "rcmixup"
    bandwidths: tuple = (1e-3, 1e-2, 1e-1, 1.0, 10.0)
    b0: float = 10.0
    update_interval: int = 200
    lookahead: int = 200
    tau: Optional[float] = None  # None -> 1 - noise_rate
    alpha: float = 2.0
    warmup_rounds: Optional[int] = None
    max_rounds: int = 400
    patience: int = 50
    min_delta: float = 1e-4
    decay_rate: float = 0.1
    phase_split: float = 0.5
    lr: float = 1e-2
    batch_size: int = 16
    hidden_dims: tuple = (128,)
    mix_mode: str = "input_mixup"
    mix_layer: int = 0
    squared_distance: bool = True
    robust: str = "itlm"
    o2u_cycle_length: int = 10
    o2u_cycles: int = 3
    o2u_lr_max: float = 1e-2
    o2u_lr_min: float = 1e-4
    o2u_pretrain_rounds: Optional[int] = None
    selfie_q: int = 5
    selfie_threshold: Optional[float] = None
    selfie_percentile: float = 25.0
    workers: int = 1
    # run control
    seeds: tuple = (0, 1, 2, 3, 4)
    output_dir: str = "runs"

    @property
    def clean_ratio(self) -> float:
        return 1.0 - self.noise_rate if self.tau is None else self.tau

    @property
    def validation_ratio(self) -> float:
        return 1.0 - self.noise_rate if self.tau_v is None else self.tau_v

    def rc_config(self) -> RCConfig:
        o2u = O2UConfig(self.o2u_cycle_length, self.o2u_cycles, self.o2u_lr_max, self.o2u_lr_min,
                        self.o2u_pretrain_rounds)
        return RCConfig(
            bandwidths=self.bandwidths, update_interval=self.update_interval, lookahead=self.lookahead,
            tau=self.clean_ratio, alpha=self.alpha, b0=self.b0, warmup_rounds=self.warmup_rounds,
            max_rounds=self.max_rounds, patience=self.patience, min_delta=self.min_delta,
            decay_rate=self.decay_rate, phase_split=self.phase_split, lr=self.lr,
            batch_size=self.batch_size, hidden_dims=self.hidden_dims, mix_mode=self.mix_mode,
            mix_layer=self.mix_layer, robust=self.robust, o2u=o2u, selfie_q=self.selfie_q,
            selfie_threshold=self.selfie_threshold, selfie_percentile=self.selfie_percentile,
            squared_distance=self.squared_distance, workers=self.workers,
        )

    def problems(self) -> list:
        p = []
        if self.dataset not in DATASETS:
            p.append(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.dataset in ("csv", "timeseries") and not self.data_path:
            p.append(f"dataset {self.dataset!r} needs data_path")
        if self.mode not in MODES:
            p.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.validation not in VALIDATION_MODES:
            p.append(f"validation must be one of {VALIDATION_MODES}, got {self.validation!r}")
        if self.noise_kind not in ("gaussian", "label_flip"):
            p.append("noise_kind must be gaussian or label_flip")
        if not 0 <= self.noise_rate <= 0.5:
            p.append("noise_rate must be in [0, 0.5]")
        if self.noise_magnitude < 0:
            p.append("noise_magnitude must be >= 0")
        if self.tau_v is not None and not 0 < self.tau_v <= 1:
            p.append("tau_v must be in (0, 1]")
        if self.tau is None and self.noise_rate >= 1:
            p.append("tau cannot be derived from noise_rate")
        if min(self.n_train, self.n_val) < 1:
            p.append("n_train and n_val must be >= 1")
        if self.n_test is not None and self.n_test < 0:
            p.append("n_test must be >= 0")
        if self.label_dims < 1:
            p.append("label_dims must be >= 1")
        if self.window < 1 or self.horizon < 1:
            p.append("window and horizon must be >= 1")
        if min(self.synth_n, self.synth_d, self.synth_e) < 1:
            p.append("synth_n, synth_d, synth_e must be >= 1")
        if not self.seeds:
            p.append("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            p.append("seeds must be distinct")
        if self.workers < 1:
            p.append("workers must be >= 1")
        if self.robust not in ROBUST_BACKENDS:
            p.append(f"robust must be one of {ROBUST_BACKENDS}")
        if self.o2u_cycle_length < 2:
            p.append("o2u_cycle_length must be >= 2")
        if self.o2u_cycles < 1:
            p.append("o2u_cycles must be >= 1")
        if not self.o2u_lr_max > self.o2u_lr_min > 0:
            p.append("need o2u_lr_max > o2u_lr_min > 0")
        try:
            p.extend(q for q in RCConfig.problems(_unchecked_rc(self)) if q not in p)
        except (TypeError, ValueError) as exc:
            p.append(str(exc))
        return p

    def validate(self) -> "ExperimentConfig":
        p = self.problems()
        if p:
            raise ConfigError("invalid configuration:\n  - " + "\n  - ".join(p))
        return self

    def to_dict(self) -> dict:
        """Plain dict of every set field (None values left out, tuples as lists)."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def fingerprint(self) -> str:
        """Hash of everything that affects a single seed's result."""
        d = self.to_dict()
        for k in ("name", "seeds", "output_dir", "workers"):
            d.pop(k, None)
        return _digest(d)

    def data_fingerprint(self, source_fingerprint: str = "") -> str:
        """Hash of the data, split, noise and validation settings plus the loaded source data."""
        keys = ("dataset", "data_path", "label_dims", "window", "horizon", "synth_n", "synth_d",
                "synth_e", "synth_scale", "synth_offset", "synth_seed", "n_train", "n_val", "n_test",
                "split_seed", "noise_kind", "noise_rate", "noise_magnitude", "validation", "tau_v")
        d = {k: getattr(self, k) for k in keys}
        if self.dataset in BENCHMARKS:
            d.pop("data_path")  # the directory may move; the content hash pins the data
        d["source"] = source_fingerprint
        return _digest(d)


def _unchecked_rc(cfg: ExperimentConfig) -> RCConfig:
    """RCConfig instance built without running its constructor check, for listing problems."""
    rc = object.__new__(RCConfig)
    values = {f.name: getattr(cfg, f.name) for f in fields(RCConfig) if hasattr(cfg, f.name)}
    values["tau"] = cfg.clean_ratio
    values["bandwidths"] = tuple(float(b) for b in cfg.bandwidths)
    values["o2u"] = None
    for f in fields(RCConfig):
        object.__setattr__(rc, f.name, values.get(f.name, f.default))
    return rc


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=list).encode()).hexdigest()[:16]


# Hyperparameters per benchmark; sizes are train/validation counts and test is the remainder.
PRESETS = {
    "spectrum_synth": dict(
        dataset="spectrum_synth", synth_n=3000, synth_d=226, synth_e=4, synth_scale=20.0,
        synth_offset=0.0, n_train=2000, n_val=500, mix_mode="input_mixup", batch_size=128, lr=1e-2,
        max_rounds=2000, bandwidths=(5.0, 10.0, 15.0, 20.0), b0=20.0, update_interval=500,
        lookahead=500, alpha=2.0, noise_magnitude=2.0,
    ),
    "no2": dict(
        dataset="no2", n_train=200, n_val=200, mix_mode="input_mixup", batch_size=32, lr=1e-2,
        max_rounds=200, bandwidths=(1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 5e-1, 1.0), b0=2.0,
        update_interval=100, lookahead=100, alpha=2.0, noise_magnitude=4.0,
    ),
    "airfoil": dict(
        dataset="airfoil", n_train=1000, n_val=400, mix_mode="manifold_mixup", batch_size=16, lr=1e-2,
        max_rounds=400, bandwidths=(1e-3, 1e-2, 1e-1, 1.0, 10.0), b0=10.0, update_interval=200,
        lookahead=200, alpha=0.5, noise_magnitude=2.0,
    ),
    "exchange_rate": dict(
        dataset="exchange_rate", window=168, horizon=12, n_train=4373, n_val=1518,
        mix_mode="input_mixup", batch_size=128, lr=1e-3, max_rounds=200,
        bandwidths=(1e-3, 1e-2, 5e-2, 1e-1), b0=2.0, update_interval=50, lookahead=50, alpha=2.0,
        noise_magnitude=5.0,
    ),
}

_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_TUPLE_FIELDS = {"bandwidths", "hidden_dims", "seeds"}


def _coerce(name: str, value, problems: list):
    default = _FIELDS[name].default
    if name in _TUPLE_FIELDS:
        if not isinstance(value, (list, tuple)):
            problems.append(f"{name}: expected a list, got {type(value).__name__}")
            return default
        caster = float if name == "bandwidths" else int
        try:
            return tuple(caster(v) for v in value)
        except (TypeError, ValueError):
            problems.append(f"{name}: non-numeric entry in {value!r}")
            return default
    kind = type(default) if default is not None else None
    if default is None:
        kind = int if name in ("n_test", "warmup_rounds", "o2u_pretrain_rounds") else float
    if kind is bool:
        if not isinstance(value, bool):
            problems.append(f"{name}: expected true/false, got {value!r}")
            return default
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{name}: expected a number, got {value!r}")
            return default
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{name}: expected an integer, got {value!r}")
            return default
        return value
    if not isinstance(value, str):
        problems.append(f"{name}: expected a string, got {value!r}")
        return default
    return value


def from_dict(raw: dict, source: str = "<config>") -> ExperimentConfig:
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"{source}: unknown config key(s): {', '.join(unknown)}")
    values = {}
    preset = raw.get("preset", "")
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"{source}: unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        values.update(PRESETS[preset])
    problems = []
    for k, v in raw.items():
        values[k] = _coerce(k, v, problems)
    if problems:
        raise ConfigError(f"{source}: invalid values:\n  - " + "\n  - ".join(problems))
    return ExperimentConfig(**values).validate()


def parse(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{source}: tables are not allowed in the flat config: {', '.join(nested)}")
    return from_dict(raw, source)


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse(path.read_text(encoding="utf-8"), str(path))


def preset_config(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    values = {**PRESETS[name], "preset": name, **overrides}
    return dataclasses.replace(ExperimentConfig(), **values).validate()
