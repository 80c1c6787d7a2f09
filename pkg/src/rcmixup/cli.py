"""Command line entry point: ``rcmixup {run,report,tune,inject-noise,preset,schema}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import PRESETS, ConfigError, load, preset_config
from .data import save_noisy
from .experiment import (RUN_SCHEMA, ReportError, build_table, collect_reports, format_table, output_root,
                         prepare, report_stem, run_experiment, run_seed, summary_line, table_csv, write_json)

log = logging.getLogger("rcmixup")

# fixed-bandwidth mode whose grid a ``tune`` call searches
_GRID_MODE = {
    "rcmixup": "c_then_r_plus_c",
    "rcmixup_decay": "c_then_r_plus_c",
    "c_then_r_plus_c": "c_then_r_plus_c",
    "cmixup_only": "cmixup_only",
    "r_then_c": "r_then_c",
    "c_then_r": "c_then_r",
}


def _config(args):
    cfg = load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    return cfg


def _out(args, cfg) -> Path:
    return Path(args.out) if getattr(args, "out", None) else output_root(cfg)


def cmd_run(args) -> int:
    cfg = _config(args)
    reports, agg = run_experiment(cfg, jobs=args.jobs, out=_out(args, cfg))
    for rep in reports:
        if rep["status"] != "ok":
            print(f"seed {rep['seed']} failed: {rep['error']}", file=sys.stderr)
    print(summary_line(agg))
    return 1 if agg["failed_seeds"] else 0


def cmd_report(args) -> int:
    def warn(msg):
        print(f"warning: {msg}", file=sys.stderr)

    cells = build_table(collect_reports(args.directory, warn))
    print(format_table(cells))
    csv_path = Path(args.csv) if args.csv else Path(args.directory) / "comparison.csv"
    csv_path.write_text(table_csv(cells), encoding="utf-8")
    print(f"wrote {csv_path}")
    return 0


def cmd_tune(args) -> int:
    cfg = _config(args)
    if cfg.mode not in _GRID_MODE:
        raise ConfigError(f"mode {cfg.mode!r} has no bandwidth to tune")
    grid_cfg = dataclasses.replace(cfg, mode=_GRID_MODE[cfg.mode])
    out = _out(args, cfg)
    failed = False
    for seed in cfg.seeds:
        rep = run_seed(grid_cfg, seed)
        if rep["status"] != "ok":
            failed = True
            print(f"seed {seed} failed: {rep['error']}", file=sys.stderr)
            continue
        grid = rep["result"]["grid"]
        best = min(grid, key=grid.get)
        print(f"seed {seed} ({grid_cfg.mode}): " + "  ".join(f"b={b}: {v:.4f}" for b, v in grid.items())
              + f"  -> best b={best}")
        write_json(out / f"{report_stem(rep)}__tune_seed{seed}.json",
                   {"kind": "tune", "seed": seed, "mode": grid_cfg.mode, "grid": grid, "best": float(best),
                    "config_fingerprint": rep["config_fingerprint"]})
    return 1 if failed else 0


def cmd_inject_noise(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg) / "noisy"
    for seed in cfg.seeds:
        prep = prepare(dataclasses.replace(cfg, validation="clean"), seed)
        stem = f"{cfg.dataset}_{cfg.noise_kind}_r{cfg.noise_rate:g}_m{cfg.noise_magnitude:g}_seed{seed}"
        out.mkdir(parents=True, exist_ok=True)
        save_noisy(prep.train, prep.record, out / f"{stem}.csv", out / f"{stem}.noise.json")
        print(f"seed {seed}: {prep.record.size} of {prep.train.n} labels corrupted -> {out / stem}.csv")
    return 0


def cmd_preset(args) -> int:
    sys.stdout.write(preset_config(args.name).to_toml())
    return 0


def cmd_schema(args) -> int:
    print(json.dumps(RUN_SCHEMA, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rcmixup", description="Robust C-Mixup experiments for noisy regression.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every seed of a config and write JSON reports")
    r.add_argument("config")
    r.add_argument("--seed", type=int, help="run only this seed")
    r.add_argument("--jobs", type=int, default=1, help="seeds to run in parallel processes")
    r.add_argument("--out", help="output directory (default: $RCMIXUP_OUTPUT or output_dir)")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="aggregate run reports into a comparison table")
    rep.add_argument("directory")
    rep.add_argument("--csv", help="CSV output path (default: <directory>/comparison.csv)")
    rep.set_defaults(func=cmd_report)

    t = sub.add_parser("tune", help="grid-search a single fixed bandwidth")
    t.add_argument("config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_tune)

    n = sub.add_parser("inject-noise", help="write the noisy training set and its noise record")
    n.add_argument("config")
    n.add_argument("--seed", type=int)
    n.add_argument("--out")
    n.set_defaults(func=cmd_inject_noise)

    ps = sub.add_parser("preset", help="print a per-dataset preset config")
    ps.add_argument("name", choices=sorted(PRESETS))
    ps.set_defaults(func=cmd_preset)

    s = sub.add_parser("schema", help="print the run report JSON schema")
    s.set_defaults(func=cmd_schema)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ReportError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
