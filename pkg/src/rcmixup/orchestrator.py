"""RC-Mixup training loop, its baselines and validation-set cleaning.

A *round* is one epoch over the current (cleaned, mixed) training set.
Every round draws its randomness from ``round_rng(seed, round, stream)``;
the main line uses stream 0 and bandwidth candidate ``j`` uses stream ``j``
during look-ahead, so results do not depend on evaluation order.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .data import Dataset, NoiseRecord, Standardizer
from .metrics import MetricResult, evaluate, rmse
from .mixup import DistanceMatrix, MixConfig, build_label_distances, cmixup_epoch, sampling_probs
from .nncore import Batch, ModelSpec, Params, TrainState, forward, init_params, per_sample_losses, train_epoch
from .robust import (CleanSelection, O2UConfig, SelfieState, detection_accuracy, itlm_select,
                     o2u_rank, selfie_step)

log = logging.getLogger(__name__)

MODES = ("rcmixup", "cmixup_only", "robust_only", "r_then_c", "c_then_r", "c_then_r_plus_c",
         "rcmixup_decay")
ROBUST_BACKENDS = ("itlm", "o2u", "selfie")
O2U_STREAM = 10 ** 6


@dataclass(frozen=True)
class RCConfig:
    bandwidths: tuple = (1e-3, 1e-2, 1e-1, 1.0, 10.0)
    update_interval: int = 200  # L
    lookahead: int = 200  # N
    tau: float = 0.7
    alpha: float = 2.0
    b0: float = 10.0
    warmup_rounds: Optional[int] = None  # None -> 10% of max_rounds
    max_rounds: int = 400
    patience: int = 50
    min_delta: float = 1e-4
    decay_rate: float = 0.1
    phase_split: float = 0.5  # share of max_rounds given to the first phase of r_then_c / c_then_r
    lr: float = 1e-2
    batch_size: int = 16
    hidden_dims: tuple = (128,)
    mix_mode: str = "input_mixup"
    mix_layer: int = 0
    robust: str = "itlm"
    o2u: O2UConfig = O2UConfig()
    selfie_q: int = 5
    selfie_threshold: Optional[float] = None
    selfie_percentile: float = 25.0
    squared_distance: bool = True
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "bandwidths", tuple(float(b) for b in self.bandwidths))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        problems = self.problems()
        if problems:
            raise ValueError("invalid RCConfig: " + "; ".join(problems))

    def problems(self) -> list:
        p = []
        if not self.bandwidths:
            p.append("bandwidth candidates must be non-empty")
        if any(b <= 0 for b in self.bandwidths):
            p.append("bandwidth candidates must be positive")
        if self.update_interval < 1:
            p.append("update_interval (L) must be >= 1")
        if self.lookahead < 1:
            p.append("lookahead (N) must be >= 1")
        if not 0 < self.tau <= 1:
            p.append("tau must be in (0, 1]")
        if not self.alpha > 0:
            p.append("alpha must be positive")
        if not self.b0 > 0:
            p.append("b0 must be positive")
        if not 0 <= self.decay_rate < 1:
            p.append("decay_rate must be in [0, 1)")
        if self.max_rounds < 1:
            p.append("max_rounds must be >= 1")
        if self.warmup_rounds is not None and not 0 <= self.warmup_rounds <= self.max_rounds:
            p.append("warmup_rounds must be in [0, max_rounds]")
        if self.patience < 1:
            p.append("patience must be >= 1")
        if not 0 < self.phase_split < 1:
            p.append("phase_split must be in (0, 1)")
        if not self.lr > 0:
            p.append("lr must be positive")
        if self.batch_size < 1:
            p.append("batch_size must be >= 1")
        if self.robust not in ROBUST_BACKENDS:
            p.append(f"robust must be one of {ROBUST_BACKENDS}")
        if self.mix_mode not in ("input_mixup", "manifold_mixup"):
            p.append("mix_mode must be input_mixup or manifold_mixup")
        if self.mix_mode == "manifold_mixup" and not 0 <= self.mix_layer < len(self.hidden_dims):
            p.append("mix_layer must index a hidden layer")
        if self.selfie_q < 1:
            p.append("selfie_q must be >= 1")
        return p

    @property
    def warmup(self) -> int:
        if self.warmup_rounds is not None:
            return self.warmup_rounds
        return int(round(0.1 * self.max_rounds))

    @property
    def mix(self) -> MixConfig:
        return MixConfig(self.alpha, self.mix_mode, self.mix_layer)


@dataclass
class RoundLog:
    round: int
    phase: str  # warmup | tune | step
    bandwidth: Optional[float]
    clean_size: int
    train_loss: float
    val_rmse: float
    detection_accuracy: Optional[float] = None
    wall_time: float = 0.0
    candidates: Optional[dict] = None  # bandwidth -> look-ahead validation RMSE (tune only)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    mode: str
    seed: int
    logs: list = field(default_factory=list)
    bandwidth_timeline: list = field(default_factory=list)  # (round, bandwidth)
    grid: Optional[dict] = None  # fixed-bandwidth baselines: bandwidth -> final validation RMSE
    final_val_rmse: float = float("nan")
    test: Optional[MetricResult] = None
    final_selection_size: Optional[int] = None
    final_detection_accuracy: Optional[float] = None
    wall_time: float = 0.0
    overhead_rounds: int = 0  # candidate rounds spent on discarded bandwidths

    @property
    def detection_timeline(self) -> list:
        return [(g.round, g.detection_accuracy) for g in self.logs if g.detection_accuracy is not None]

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "rounds": [g.to_json() for g in self.logs],
            "bandwidth_timeline": [{"round": r, "bandwidth": b} for r, b in self.bandwidth_timeline],
            "detection_timeline": [{"round": r, "accuracy": a} for r, a in self.detection_timeline],
            "grid": None if self.grid is None else {repr(b): v for b, v in self.grid.items()},
            "final_val_rmse": self.final_val_rmse,
            "test": None if self.test is None else self.test.to_json(),
            "final_selection_size": self.final_selection_size,
            "final_detection_accuracy": self.final_detection_accuracy,
            "wall_time": self.wall_time,
            "overhead_rounds": self.overhead_rounds,
        }


def round_rng(seed: int, round_index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(round_index), int(stream)])


def decay_bandwidth(b: float, rate: float) -> float:
    if not b > 0 or not 0 <= rate < 1:
        raise ValueError("need b > 0 and 0 <= rate < 1")
    return b * (1.0 - rate)


@dataclass(frozen=True)
class Task:
    """Scaled training/validation arrays shared by every run on one dataset."""

    X: np.ndarray  # standardized training features
    Yt: np.ndarray  # standardized (noisy) training labels, used for fitting
    Y: np.ndarray  # raw training labels; bandwidths live in these units
    Xv: np.ndarray
    Yv: np.ndarray  # raw validation labels
    x_scaler: Standardizer
    y_scaler: Standardizer
    dist: DistanceMatrix
    record: Optional[NoiseRecord] = None

    @classmethod
    def build(cls, train: Dataset, validation: Dataset, record: Optional[NoiseRecord] = None,
              squared_distance: bool = True) -> "Task":
        if validation.n == 0:
            raise ValueError("validation set is empty")
        xs = Standardizer.fit(train.X)
        ys = Standardizer.fit(train.Y)
        return cls(xs.transform(train.X), ys.transform(train.Y), train.Y, xs.transform(validation.X),
                   validation.Y, xs, ys, build_label_distances(train.Y, squared_distance), record)

    @property
    def n(self) -> int:
        return len(self.X)

    def predict(self, params: Params, X_raw) -> np.ndarray:
        return self.y_scaler.inverse(forward(params, self.x_scaler.transform(np.atleast_2d(X_raw))))

    def val_rmse(self, params: Params) -> float:
        return rmse(self.Yv, self.y_scaler.inverse(forward(params, self.Xv)))


@dataclass(frozen=True)
class LoopState:
    """Everything a candidate clone needs: model, optimizer and back-end state."""

    train: TrainState
    backend: object = None  # O2U: cached CleanSelection; SELFIE: SelfieState


@dataclass(frozen=True)
class RoundResult:
    state: LoopState
    selection: Optional[CleanSelection]
    train_loss: float


def initial_state(task: Task, cfg: RCConfig, seed: int) -> LoopState:
    spec = ModelSpec(task.X.shape[1], cfg.hidden_dims, task.Yt.shape[1])
    return LoopState(TrainState.create(init_params(spec, seed), lr=cfg.lr))


def _fit_round(task: Task, cfg: RCConfig, state: TrainState, labels: np.ndarray, active: np.ndarray,
               bandwidth: Optional[float], rng: np.random.Generator) -> TrainState:
    if bandwidth is None:
        samples = Batch(task.X[active], labels[active])
    else:
        sampler = sampling_probs(task.dist, bandwidth, active)
        samples = cmixup_epoch(task.X, labels, sampler, cfg.mix, rng).training_samples(task.X)
    return train_epoch(state, samples, cfg.batch_size, rng)


def warmup_round(task: Task, cfg: RCConfig, state: LoopState, bandwidth: Optional[float],
                 rng: np.random.Generator) -> RoundResult:
    """One round on the full, uncleaned training set (C-Mixup when a bandwidth is given)."""
    loss = float(per_sample_losses(state.train.params, task.X, task.Yt).mean())
    ts = _fit_round(task, cfg, state.train, task.Yt, np.arange(task.n), bandwidth, rng)
    return RoundResult(replace(state, train=ts), None, loss)


def warmup_train(task: Task, cfg: RCConfig, state: LoopState, bandwidth: Optional[float], rounds: int,
                 seed: int, start: int = 0) -> LoopState:
    for r in range(start, start + rounds):
        state = warmup_round(task, cfg, state, bandwidth, round_rng(seed, r)).state
    return state


def clean_step(task: Task, cfg: RCConfig, state: LoopState, rng: np.random.Generator) -> tuple:
    """Run the configured back-end; returns (selection, active rows, fitting labels, new state)."""
    params = state.train.params
    if cfg.robust == "itlm":
        sel = itlm_select(per_sample_losses(params, task.X, task.Yt), cfg.tau)
        return sel, sel.indices, task.Yt, state
    if cfg.robust == "o2u":
        sel = state.backend
        if sel is None:
            sel = o2u_rank(state.train, task.X, task.Yt, cfg.o2u, cfg.tau, rng, cfg.batch_size)
            state = replace(state, backend=sel)
        return sel, sel.indices, task.Yt, state
    selfie = state.backend
    if selfie is None:
        selfie = SelfieState.create(task.Yt, cfg.selfie_q, cfg.selfie_threshold, cfg.selfie_percentile)
    preds = forward(params, task.X)
    losses = np.mean((preds - task.Yt) ** 2, axis=1)
    selfie, core, view = selfie_step(selfie, preds, losses, cfg.tau)
    return core, view.indices, view.labels, replace(state, backend=selfie)


def rc_round(task: Task, cfg: RCConfig, state: LoopState, bandwidth: Optional[float],
             rng: np.random.Generator) -> RoundResult:
    """Clean, then mix the clean rows at ``bandwidth`` (no mixing when None), then update."""
    sel, active, labels, state = clean_step(task, cfg, state, rng)
    loss = float(np.mean((forward(state.train.params, task.X[sel.indices]) - task.Yt[sel.indices]) ** 2)) \
        if len(sel) else float("nan")
    ts = _fit_round(task, cfg, state.train, labels, active, bandwidth, rng)
    return RoundResult(replace(state, train=ts), sel, loss)


@dataclass
class TuneResult:
    bandwidth: float
    state: LoopState
    selection: Optional[CleanSelection]
    train_loss: float
    candidates: dict


def tune_bandwidth(task: Task, cfg: RCConfig, state: LoopState, bandwidths, rounds: int, seed: int,
                   start: int, evaluator=None) -> TuneResult:
    """Run every candidate for ``rounds`` rounds from the same snapshot; keep the best clone.

    ``evaluator(params) -> float`` scores a clone (validation RMSE by default).
    """
    bandwidths = tuple(bandwidths)
    if not bandwidths:
        raise ValueError("no bandwidth candidates")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    evaluator = evaluator or task.val_rmse

    def run(j):
        st, res = state, None
        for k in range(rounds):
            res = rc_round(task, cfg, st, bandwidths[j], round_rng(seed, start + k, j))
            st = res.state
        return evaluator(st.train.params), res

    if cfg.workers > 1 and len(bandwidths) > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            outcomes = list(pool.map(run, range(len(bandwidths))))
    else:
        outcomes = [run(j) for j in range(len(bandwidths))]
    scores = [s for s, _ in outcomes]
    best = int(np.argmin(scores))  # first index wins ties
    res = outcomes[best][1]
    return TuneResult(bandwidths[best], res.state, res.selection, res.train_loss,
                      {b: float(s) for b, s in zip(bandwidths, scores)})


class _Run:
    """Bookkeeping shared by all pipeline modes: round counter, logs, convergence."""

    def __init__(self, task: Task, cfg: RCConfig, seed: int, mode: str, state: Optional[LoopState] = None):
        self.task, self.cfg, self.seed = task, cfg, seed
        self.state = state or initial_state(task, cfg, seed)
        self.report = RunReport(mode, seed)
        self.r = 0
        self.selection: Optional[CleanSelection] = None
        self.best = np.inf
        self.stale = 0
        self.t0 = time.perf_counter()

    def fork(self) -> "_Run":
        other = _Run.__new__(_Run)
        other.__dict__.update(self.__dict__)
        other.report = replace(self.report, logs=list(self.report.logs),
                               bandwidth_timeline=list(self.report.bandwidth_timeline))
        other.t0 = time.perf_counter()
        return other

    @property
    def converged(self) -> bool:
        return self.stale >= self.cfg.patience

    @property
    def remaining(self) -> int:
        return self.cfg.max_rounds - self.r

    def _log(self, phase, bandwidth, res: RoundResult, rounds=1, candidates=None, track=True):
        self.state = res.state
        self.r += rounds
        if res.selection is not None:
            self.selection = res.selection
        val = self.task.val_rmse(self.state.train.params)
        det = None
        if self.task.record is not None and self.selection is not None:
            det = detection_accuracy(self.selection, self.task.record)
        size = self.task.n if res.selection is None else len(res.selection)
        self.report.logs.append(RoundLog(self.r - 1, phase, bandwidth, size, res.train_loss, val, det,
                                         time.perf_counter() - self.t0, candidates))
        if bandwidth is not None and (not self.report.bandwidth_timeline
                                      or self.report.bandwidth_timeline[-1][1] != bandwidth):
            self.report.bandwidth_timeline.append((self.r - 1, bandwidth))
        if track:
            if val < self.best - self.cfg.min_delta:
                self.best, self.stale = val, 0
            else:
                self.stale += rounds

    def warmup(self, bandwidth: Optional[float], rounds: int):
        if self.cfg.robust == "o2u" and self.cfg.o2u.pretrain_rounds is not None:
            rounds = self.cfg.o2u.pretrain_rounds
        for _ in range(min(rounds, self.remaining)):
            res = warmup_round(self.task, self.cfg, self.state, bandwidth, round_rng(self.seed, self.r))
            self._log("warmup", bandwidth, res, track=False)
        if self.cfg.robust == "o2u" and self.state.backend is None:
            # rank once from the pre-trained model so every candidate shares the clean set
            _, _, _, self.state = clean_step(self.task, self.cfg, self.state, round_rng(self.seed, self.r, O2U_STREAM))

    def plain(self, bandwidth: Optional[float], rounds: int, phase="step"):
        """Rounds on the full set without cleaning (C-Mixup or ERM), tracking convergence."""
        for _ in range(min(rounds, self.remaining)):
            if self.converged:
                break
            res = warmup_round(self.task, self.cfg, self.state, bandwidth, round_rng(self.seed, self.r))
            self._log(phase, bandwidth, res)

    def step(self, bandwidth: Optional[float]):
        res = rc_round(self.task, self.cfg, self.state, bandwidth, round_rng(self.seed, self.r))
        self._log("step", bandwidth, res)

    def fixed_set(self, bandwidth: Optional[float], rounds: int):
        """Rounds on the last selected clean set, without re-cleaning."""
        active = self.selection.indices if self.selection is not None else np.arange(self.task.n)
        for _ in range(min(rounds, self.remaining)):
            if self.converged:
                break
            rng = round_rng(self.seed, self.r)
            loss = float(per_sample_losses(self.state.train.params, self.task.X[active], self.task.Yt[active]).mean())
            ts = _fit_round(self.task, self.cfg, self.state.train, self.task.Yt, active, bandwidth, rng)
            self._log("step", bandwidth, RoundResult(replace(self.state, train=ts), self.selection, loss))

    def tune(self, bandwidths):
        rounds = min(self.cfg.lookahead, self.remaining)
        res = tune_bandwidth(self.task, self.cfg, self.state, bandwidths, rounds, self.seed, self.r)
        self.report.overhead_rounds += rounds * (len(bandwidths) - 1)
        self._log("tune", res.bandwidth, RoundResult(res.state, res.selection, res.train_loss),
                  rounds=rounds, candidates={repr(b): v for b, v in res.candidates.items()})
        return res.bandwidth

    def finish(self, test: Optional[Dataset]) -> RunReport:
        rep = self.report
        rep.final_val_rmse = self.task.val_rmse(self.state.train.params)
        if test is not None and test.n:
            rep.test = evaluate(test.Y, self.task.predict(self.state.train.params, test.X))
        if self.selection is not None:
            rep.final_selection_size = len(self.selection)
            if self.task.record is not None:
                rep.final_detection_accuracy = detection_accuracy(self.selection, self.task.record)
        rep.wall_time += time.perf_counter() - self.t0
        return rep


def _rcmixup(run: _Run, decay: bool):
    cfg = run.cfg
    b = cfg.b0
    run.warmup(b, cfg.warmup)
    i = 0
    while run.remaining > 0 and not run.converged:
        if decay:
            if i > 0 and i % cfg.update_interval == 0:
                b = decay_bandwidth(b, cfg.decay_rate)
            run.step(b)
        elif i % cfg.update_interval == 0:
            b = run.tune(cfg.bandwidths)
        else:
            run.step(b)
        i += 1


def _grid(runs: dict) -> tuple:
    """Pick the run with the lowest final validation RMSE (ties -> first candidate)."""
    scores = {b: r.task.val_rmse(r.state.train.params) for b, r in runs.items()}
    best_b = min(scores, key=lambda b: (scores[b], list(scores).index(b)))
    return best_b, scores


def run_pipeline(mode: str, cfg: RCConfig, train: Dataset, validation: Dataset,
                 record: Optional[NoiseRecord] = None, seed: int = 0, test: Optional[Dataset] = None,
                 task: Optional[Task] = None) -> tuple:
    """Train one model in ``mode``; returns (final LoopState, RunReport)."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "rcmixup_decay" and cfg.decay_rate == 0:
        raise ValueError("rcmixup_decay needs decay_rate > 0")
    if mode == "r_then_c" and cfg.robust == "selfie":
        raise ValueError("r_then_c trains on a frozen clean set; SELFIE refurbishment is not supported")
    task = task or Task.build(train, validation, record, cfg.squared_distance)
    t0 = time.perf_counter()
    first = max(1, int(round(cfg.phase_split * cfg.max_rounds)))

    if mode in ("rcmixup", "rcmixup_decay"):
        run = _Run(task, cfg, seed, mode)
        _rcmixup(run, decay=(mode == "rcmixup_decay"))
    elif mode == "robust_only":
        run = _Run(task, cfg, seed, mode)
        run.warmup(None, cfg.warmup)
        while run.remaining > 0 and not run.converged:
            run.step(None)
    else:
        runs = {}
        if mode == "r_then_c":
            base = _Run(task, cfg, seed, mode)
            base.warmup(None, cfg.warmup)
            while base.r < first and not base.converged:
                base.step(None)
            base.stale, base.best = 0, np.inf
        for b in cfg.bandwidths:
            if mode == "r_then_c":
                run = base.fork()
                run.fixed_set(b, run.remaining)
            else:
                run = _Run(task, cfg, seed, mode)
                if mode == "cmixup_only":
                    run.plain(b, cfg.max_rounds)
                elif mode == "c_then_r":
                    run.plain(b, first)
                    run.stale, run.best = 0, np.inf
                    while run.remaining > 0 and not run.converged:
                        run.step(None)
                else:  # c_then_r_plus_c
                    run.warmup(b, cfg.warmup)
                    while run.remaining > 0 and not run.converged:
                        run.step(b)
            runs[b] = run
        best_b, scores = _grid(runs)
        run = runs[best_b]
        run.report.grid = scores

    report = run.finish(test)
    report.wall_time = time.perf_counter() - t0
    return run.state, report


def clean_validation_with_rt(noisy_validation: Dataset, tau_v: float, cfg: RCConfig, seed: int = 0) -> Dataset:
    """Robust-train on the noisy validation set alone and keep its final clean selection."""
    if noisy_validation.n == 0:
        raise ValueError("validation set is empty")
    if not 0 < tau_v <= 1:
        raise ValueError("tau_v must be in (0, 1]")
    if tau_v == 1:
        return noisy_validation
    vcfg = replace(cfg, tau=tau_v)
    state, _ = run_pipeline("robust_only", vcfg, noisy_validation, noisy_validation, seed=seed)
    task = Task.build(noisy_validation, noisy_validation)
    sel, *_ = clean_step(task, vcfg, state, round_rng(seed, vcfg.max_rounds, O2U_STREAM))
    return noisy_validation.subset(sel.indices)
