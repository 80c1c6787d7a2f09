"""Experiment execution: data preparation, per-seed runs, JSON reports and comparison tables."""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import logging
import os
import re
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import __version__
from .config import BENCHMARKS, ExperimentConfig
from .data import (Dataset, NoiseRecord, NoiseSpec, SplitSpec, TargetSpec, inject_noise, load_benchmark,
                   load_csv, load_series, split_dataset, synth_regression, window_timeseries)
from .metrics import MetricResult, aggregate_seeds
from .orchestrator import Task, clean_validation_with_rt, run_pipeline

log = logging.getLogger(__name__)

OUTPUT_ENV = "RCMIXUP_OUTPUT"
SCHEMA_VERSION = 1
# row order of comparison tables; unknown methods follow alphabetically
METHOD_ORDER = ("cmixup_only", "robust_only", "r_then_c", "c_then_r", "c_then_r_plus_c", "rcmixup",
                "rcmixup_decay")
# validation labels are corrupted with a seed offset so they never share draws with training noise
VALIDATION_NOISE_OFFSET = 1_000_003

_num = {"type": "number"}
_num_or_null = {"type": ["number", "null"]}
_metric = {
    "type": "object",
    "required": ["rmse", "mape", "n"],
    "properties": {"rmse": _num, "mape": _num, "n": {"type": "integer", "minimum": 0}},
}
RUN_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "rcmixup run report",
    "type": "object",
    "required": ["kind", "schema_version", "version", "dataset", "method", "seed", "config",
                 "config_fingerprint", "data_fingerprint", "status", "result"],
    "properties": {
        "kind": {"const": "run"},
        "schema_version": {"const": SCHEMA_VERSION},
        "version": {"type": "string"},
        "name": {"type": "string"},
        "dataset": {"type": "string"},
        "method": {"type": "string"},
        "seed": {"type": "integer"},
        "config": {"type": "object"},
        "config_fingerprint": {"type": "string", "pattern": "^[0-9a-f]{16}$"},
        "data_fingerprint": {"type": "string"},
        "status": {"enum": ["ok", "failed"]},
        "error": {"type": ["string", "null"]},
        "timestamp": {"type": "string"},
        "model": {"type": ["object", "null"]},
        "preprocessing": {"type": ["object", "null"]},
        "result": {
            "type": ["object", "null"],
            "required": ["mode", "seed", "rounds", "bandwidth_timeline", "test", "final_val_rmse"],
            "properties": {
                "rounds": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["round", "phase", "bandwidth", "clean_size", "val_rmse"],
                        "properties": {
                            "round": {"type": "integer"},
                            "phase": {"enum": ["warmup", "tune", "step"]},
                            "bandwidth": _num_or_null,
                            "clean_size": {"type": "integer", "minimum": 0},
                            "val_rmse": _num,
                            "detection_accuracy": _num_or_null,
                        },
                    },
                },
                "bandwidth_timeline": {"type": "array"},
                "detection_timeline": {"type": "array"},
                "test": {"oneOf": [{"type": "null"}, _metric]},
                "final_val_rmse": _num,
            },
        },
    },
    "allOf": [
        {"if": {"properties": {"status": {"const": "ok"}}},
         "then": {"properties": {"result": {"type": "object", "required": ["test"],
                                            "properties": {"test": _metric}}}}},
    ],
}


class ReportError(RuntimeError):
    pass


def output_root(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def method_label(cfg: ExperimentConfig) -> str:
    if cfg.name:
        return cfg.name
    label = cfg.mode if cfg.robust == "itlm" else f"{cfg.mode}[{cfg.robust}]"
    if cfg.validation != "clean":
        label += f"(val={cfg.validation})"
    return label


def dataset_label(cfg: ExperimentConfig) -> str:
    if cfg.dataset in ("csv", "timeseries"):
        return Path(cfg.data_path).stem
    return cfg.dataset


def load_source(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset in BENCHMARKS:
        return load_benchmark(cfg.dataset, cfg.data_path or None, cfg.window, cfg.horizon)
    if cfg.dataset == "csv":
        return load_csv(cfg.data_path, cfg.label_dims)
    if cfg.dataset == "timeseries":
        path = Path(cfg.data_path)
        if not path.exists():
            raise FileNotFoundError(path)
        return window_timeseries(load_series(path), cfg.window, cfg.horizon)
    target = TargetSpec(scale=cfg.synth_scale, offset=cfg.synth_offset, frequency=3.0)
    return synth_regression(cfg.synth_n, cfg.synth_d, cfg.synth_e, target, cfg.synth_seed)


@dataclass
class Prepared:
    train: Dataset  # noisy
    record: NoiseRecord
    validation: Dataset
    test: Dataset
    data_fingerprint: str


def prepare(cfg: ExperimentConfig, seed: int, source: Optional[Dataset] = None) -> Prepared:
    """Split, corrupt the training labels with the seed, and build the validation set."""
    source = source if source is not None else load_source(cfg)
    train, val, test = split_dataset(source, SplitSpec(cfg.n_train, cfg.n_val, cfg.n_test, cfg.split_seed))
    noisy, record = inject_noise(train, NoiseSpec(cfg.noise_kind, cfg.noise_rate, cfg.noise_magnitude, seed))
    if cfg.validation != "clean":
        vspec = NoiseSpec(cfg.noise_kind, cfg.noise_rate, cfg.noise_magnitude, seed + VALIDATION_NOISE_OFFSET)
        val, _ = inject_noise(val, vspec)
        if cfg.validation == "cleaned_rt":
            val = clean_validation_with_rt(val, cfg.validation_ratio, cfg.rc_config(), seed)
    return Prepared(noisy, record, val, test, cfg.data_fingerprint(source.fingerprint()))


def _stamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def run_seed(cfg: ExperimentConfig, seed: int, source: Optional[Dataset] = None) -> dict:
    """Run one seed and return its report; failures are captured in the report, not raised."""
    report = {
        "kind": "run",
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "name": cfg.name,
        "dataset": dataset_label(cfg),
        "method": method_label(cfg),
        "seed": int(seed),
        "config": cfg.to_dict(),
        "config_fingerprint": cfg.fingerprint(),
        "data_fingerprint": "",
        "status": "failed",
        "error": None,
        "timestamp": _stamp(),
        "model": None,
        "preprocessing": None,
        "result": None,
    }
    try:
        prep = prepare(cfg, seed, source)
        report["data_fingerprint"] = prep.data_fingerprint
        rc = cfg.rc_config()
        task = Task.build(prep.train, prep.validation, prep.record, rc.squared_distance)
        state, run = run_pipeline(cfg.mode, rc, prep.train, prep.validation, prep.record, seed=seed,
                                  test=prep.test, task=task)
        report["model"] = {"layer_dims": list(state.train.params.layer_dims),
                           "hidden_layers": len(rc.hidden_dims), "activation": "relu"}
        report["preprocessing"] = {"x": task.x_scaler.to_json(), "y": task.y_scaler.to_json(),
                                   "validation_size": prep.validation.n}
        report["result"] = run.to_json()
        if run.test is None:
            raise ValueError("the split leaves no test rows; lower n_train/n_val or set n_test")
        report["status"] = "ok"
    except Exception as exc:  # recorded per seed so the other seeds still run
        report["error"] = f"{type(exc).__name__}: {exc}"
        log.debug("seed %s failed:\n%s", seed, traceback.format_exc())
    return report


def report_stem(report: dict) -> str:
    slug = re.sub(r"[^A-Za-z0-9_.-]+", "-", f"{report['dataset']}__{report['method']}").strip("-")
    return f"{slug}__{report['config_fingerprint']}"


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def validate_report(report: dict) -> None:
    jsonschema.validate(report, RUN_SCHEMA)


def aggregate_reports(reports: list) -> dict:
    ok = [r for r in reports if r["status"] == "ok"]
    first = reports[0]
    agg = {
        "kind": "aggregate",
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "dataset": first["dataset"],
        "method": first["method"],
        "config_fingerprint": first["config_fingerprint"],
        "data_fingerprint": first["data_fingerprint"],
        "seeds": [r["seed"] for r in reports],
        "failed_seeds": [r["seed"] for r in reports if r["status"] != "ok"],
        "count": len(ok),
    }
    if ok:
        summary = aggregate_seeds([MetricResult(**r["result"]["test"]) for r in ok])
        agg.update(summary.to_json())
    return agg


def pm(mean: float, std: float, digits: int = 3) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def summary_line(agg: dict) -> str:
    head = f"{agg['dataset']} {agg['method']}"
    if not agg["count"]:
        return f"{head}: all {len(agg['seeds'])} seeds failed"
    line = (f"{head}: RMSE {pm(agg['rmse_mean'], agg['rmse_std'])}  "
            f"MAPE {pm(agg['mape_mean'], agg['mape_std'])}  ({agg['count']} seeds")
    if agg["failed_seeds"]:
        line += f", failed: {agg['failed_seeds']}"
    return line + ")"


def _run_job(args) -> dict:
    cfg, seed = args
    return run_seed(cfg, seed)


def run_experiment(cfg: ExperimentConfig, seeds=None, jobs: int = 1, out: Optional[Path] = None) -> tuple:
    """Run every seed, persist one report per seed plus the aggregate; returns (reports, aggregate)."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    out = Path(out) if out is not None else output_root(cfg)
    if jobs > 1 and len(seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(min(jobs, len(seeds))) as pool:
            reports = list(pool.map(_run_job, [(cfg, s) for s in seeds]))
    else:
        source = None
        try:
            source = load_source(cfg)
        except Exception:
            pass  # every seed reports the load error itself
        reports = [run_seed(cfg, s, source) for s in seeds]
    for rep in reports:
        validate_report(rep)
        write_json(out / f"{report_stem(rep)}__seed{rep['seed']}.json", rep)
    agg = aggregate_reports(reports)
    write_json(out / f"{report_stem(reports[0])}__aggregate.json", agg)
    return reports, agg


@dataclass
class Cell:
    dataset: str
    method: str
    count: int
    rmse_mean: float
    rmse_std: float
    mape_mean: float
    mape_std: float


def collect_reports(directory, warn=None) -> list:
    """Schema-valid successful run reports under ``directory``; invalid files are skipped with a warning."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ReportError(f"not a directory: {directory}")
    warn = warn or log.warning
    found = []
    for path in sorted(directory.rglob("*.json")):
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            warn(f"skipping {path}: unreadable JSON ({exc})")
            continue
        if not isinstance(obj, dict) or obj.get("kind") != "run":
            continue
        try:
            validate_report(obj)
        except jsonschema.ValidationError as exc:
            warn(f"skipping {path}: schema violation: {exc.message}")
            continue
        if obj["status"] != "ok":
            warn(f"skipping {path}: seed {obj['seed']} failed ({obj.get('error')})")
            continue
        found.append(obj)
    if not found:
        raise ReportError(f"no valid run reports in {directory}")
    return found


def build_table(reports: list) -> list:
    groups = {}
    for rep in reports:
        groups.setdefault((rep["dataset"], rep["method"]), []).append(rep)
    cells = []
    for (dataset, method), reps in groups.items():
        for key in ("data_fingerprint", "config_fingerprint"):
            values = sorted({r[key] for r in reps})
            if len(values) > 1:
                raise ReportError(f"cell ({dataset}, {method}) mixes runs with different {key}s: "
                                  f"{', '.join(values)}")
        by_seed = {r["seed"]: r for r in reps}
        agg = aggregate_seeds([MetricResult(**r["result"]["test"]) for _, r in sorted(by_seed.items())])
        cells.append(Cell(dataset, method, agg.count, agg.rmse_mean, agg.rmse_std, agg.mape_mean, agg.mape_std))

    def order(c: Cell):
        base = c.method.split("[")[0].split("(")[0]
        rank = METHOD_ORDER.index(base) if base in METHOD_ORDER else len(METHOD_ORDER)
        return (c.dataset, rank, c.method)

    return sorted(cells, key=order)


def format_table(cells: list) -> str:
    rows = [("dataset", "method", "seeds", "RMSE", "MAPE")]
    rows += [(c.dataset, c.method, str(c.count), pm(c.rmse_mean, c.rmse_std), pm(c.mape_mean, c.mape_std))
             for c in cells]
    widths = [max(len(r[k]) for r in rows) for k in range(5)]
    lines = ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def table_csv(cells: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "method", "seeds", "rmse_mean", "rmse_std", "mape_mean", "mape_std"])
    for c in cells:
        w.writerow([c.dataset, c.method, c.count, repr(c.rmse_mean), repr(c.rmse_std),
                    repr(c.mape_mean), repr(c.mape_std)])
    return buf.getvalue()


def strip_timing(report: dict) -> dict:
    """Copy of a run report without wall times and timestamps, for reproducibility checks."""
    rep = json.loads(json.dumps(report))
    rep.pop("timestamp", None)
    res = rep.get("result")
    if res:
        res.pop("wall_time", None)
        for g in res.get("rounds", []):
            g.pop("wall_time", None)
    return rep
