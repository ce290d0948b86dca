"""Command-line entry point.

    fedmtd validate --config cfg.yaml
    fedmtd run --config cfg.yaml --out results/ [--seed N]
    fedmtd sweep --config cfg.yaml --axis pnr --values 0.1,0.3,0.5 --out results/ [--jobs N]
    fedmtd plot-data results/metrics_<hash>.csv --series round:mean_accuracy --out series.txt

Exit codes: 0 success, 1 configuration or input error, 2 runtime failure.
Log verbosity comes from FEDMTD_LOG_LEVEL (error, warn, info, debug).
"""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import os
import sys
from pathlib import Path

from .adversary import AttackKind
from .errors import ConfigurationError, ParseError
from .experiments import (
    COLUMNS,
    CSV_HEADER,
    ExperimentConfig,
    MetricsLog,
    ScenarioKind,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
    read_metrics_csv,
    run_centralized_baseline,
    run_experiment,
    summary_text,
    write_metrics_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
SWEEP_AXES = ("pnr", "missing_ratio", "aggregation", "clients")

log = logging.getLogger("fedmtd")


def setup_logging() -> None:
    name = os.environ.get("FEDMTD_LOG_LEVEL", "warn").strip().lower()
    level = LOG_LEVELS.get(name)
    if level is None:
        raise ConfigurationError(f"FEDMTD_LOG_LEVEL must be one of error, warn, info, debug; got {name!r}")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _load(path, seed=None) -> ExperimentConfig:
    cfg = load_config(path)
    if seed is not None:
        cfg = with_seed(cfg, seed)
    return cfg


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    d = config_to_dict(cfg)
    d["seed"] = int(seed)
    d["adversary"].pop("seed", None)
    return config_from_dict(d)


def clean_reference(cfg: ExperimentConfig) -> ExperimentConfig:
    d = config_to_dict(cfg)
    d["adversary"] = {"kind": AttackKind.NONE.value, "pnr": 0.0}
    d["baseline"] = False
    return config_from_dict(d)


# ---------------------------------------------------------------- commands

def cmd_validate(config_path) -> int:
    cfg = load_config(config_path)
    print(f"ok: {config_path} (hash {config_hash(cfg)})")
    return EXIT_OK


def _run_to_files(cfg: ExperimentConfig, out: Path, force: bool = False) -> tuple[Path, MetricsLog]:
    """Run one experiment into ``metrics_<hash>.csv``; reuse an existing complete file."""
    h = config_hash(cfg)
    final = out / f"metrics_{h}.csv"
    if final.exists() and not force:
        log.info("metrics_%s.csv exists; reusing it", h)
        return final, read_metrics_csv(final)
    partial = out / f"metrics_{h}.csv.partial"
    with open(partial, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")

        def flush(row):
            w.writerow(row.cells())
            fh.flush()

        result = run_experiment(cfg, on_row=flush)
    partial.replace(final)
    return final, result


def cmd_run(config_path, out_dir, seed=None, force: bool = False) -> int:
    cfg = _load(config_path, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg)
    _, fed_log = _run_to_files(cfg, out, force)
    baseline = None
    if cfg.baseline:
        bpath = out / f"baseline_{h}.csv"
        if bpath.exists() and not force:
            baseline = read_metrics_csv(bpath)
        else:
            baseline = run_centralized_baseline(cfg)
            write_metrics_csv(baseline, bpath)
    reference = None
    if cfg.adversary.active:
        # compare against the same configuration without the adversary
        _, reference = _run_to_files(clean_reference(cfg), out)
    (out / f"summary_{h}.txt").write_text(summary_text(cfg, fed_log, baseline, reference))
    print(f"wrote {out / f'metrics_{h}.csv'} and {out / f'summary_{h}.txt'}")
    return EXIT_OK


def sweep_config(cfg: ExperimentConfig, axis: str, value: str, index: int) -> ExperimentConfig:
    d = copy.deepcopy(config_to_dict(cfg))
    if axis == "pnr":
        if cfg.adversary.kind is AttackKind.NONE:
            raise ConfigurationError("axis pnr needs an adversary kind in the config")
        d["adversary"]["pnr"] = float(value)
    elif axis == "missing_ratio":
        if cfg.scenario.kind not in (ScenarioKind.WEAK_NON_IID, ScenarioKind.FAMILY_ABSENCE):
            raise ConfigurationError("axis missing_ratio needs a weak_non_iid or family_absence scenario")
        d["scenario"]["missing_ratio"] = float(value)
    elif axis == "aggregation":
        d["federation"]["aggregation"] = value
    elif axis == "clients":
        d["federation"]["num_clients"] = int(value)
    else:
        raise ConfigurationError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    # shared seed policy: master seed xor value index
    d["seed"] = int(cfg.seed) ^ index
    d["adversary"].pop("seed", None)
    return config_from_dict(d)


def _sweep_one(cfg_dict: dict, out: str) -> tuple[str, str, list]:
    cfg = config_from_dict(cfg_dict)
    try:
        _, mlog = _run_to_files(cfg, Path(out))
        return config_hash(cfg), "ok", mlog.final.cells() if len(mlog) else [""] * len(COLUMNS)
    except Exception as exc:  # recorded per value, the sweep continues
        logging.getLogger("fedmtd").error("sweep value failed: %s", exc)
        return config_hash(cfg), f"failed: {type(exc).__name__}: {exc}", [""] * len(COLUMNS)


def cmd_sweep(config_path, axis, values, out_dir, jobs: int = 1, seed=None) -> int:
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    if jobs < 1:
        raise ConfigurationError("--jobs must be >= 1")
    base = _load(config_path, seed)
    configs = [sweep_config(base, axis, v, i) for i, v in enumerate(values)]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dicts = [config_to_dict(c) for c in configs]
    if jobs == 1:
        results = [_sweep_one(d, str(out)) for d in dicts]
    else:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=jobs)(delayed(_sweep_one)(d, str(out)) for d in dicts)
    path = out / f"sweep_{config_hash(base)}_{axis}.csv"
    with open(path, "w", newline="") as fh:
        fh.write("axis,value,config_hash,status," + CSV_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        for v, (h, status, cells) in zip(values, results):
            w.writerow([axis, v, h, status, *cells])
    failed = sum(1 for _, s, _ in results if s != "ok")
    print(f"wrote {path} ({len(values) - failed}/{len(values)} runs ok)")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def parse_series(spec: str) -> tuple[str, str]:
    parts = spec.split(":")
    if len(parts) != 2 or not all(parts):
        raise ConfigurationError(f"series spec must look like x_column:y_column, got {spec!r}")
    for col in parts:
        if col not in COLUMNS:
            raise ConfigurationError(f"unknown column {col!r}; columns: {', '.join(COLUMNS)}")
    return parts[0], parts[1]


def series_lines(mlog: MetricsLog, spec: str) -> list[str]:
    x, y = parse_series(spec)
    lines = [f"# {x} {y}"]
    for row in mlog.rows:
        xv, yv = row.value(x), row.value(y)
        if xv is None or yv is None:
            continue
        lines.append(f"{_cell(xv)} {_cell(yv)}")
    return lines


def _cell(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def cmd_plot_data(metrics_csv, series_spec, out_path=None) -> int:
    parse_series(series_spec)
    mlog = read_metrics_csv(metrics_csv)
    text = "\n".join(series_lines(mlog, series_spec)) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- argv

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmtd", description="Federated MTD-selection simulator")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a config file without running it")
    v.add_argument("--config", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=None, help="override the config master seed")
    r.add_argument("--force", action="store_true", help="rerun even if outputs exist")

    s = sub.add_parser("sweep", help="run one experiment per value along an axis")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma separated, e.g. 0.1,0.3,0.5")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--seed", type=int, default=None)

    d = sub.add_parser("plot-data", help="emit an x y series from a metrics CSV")
    d.add_argument("metrics_csv")
    d.add_argument("--series", default="round:mean_accuracy", help="x_column:y_column")
    d.add_argument("--out", default=None, help="output file (default: stdout)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; usage errors are configuration errors here
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        setup_logging()
        if args.command == "validate":
            return cmd_validate(args.config)
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed, args.force)
        if args.command == "sweep":
            values = [x.strip() for x in args.values.split(",") if x.strip()]
            return cmd_sweep(args.config, args.axis, values, args.out, args.jobs, args.seed)
        return cmd_plot_data(args.metrics_csv, args.series, args.out)
    except (ConfigurationError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
