"""Command-line experiment runner.

    ltcil generate -c exp.cfg
    ltcil run -c exp.cfg --seeds 0,1,2 --jobs 3
    ltcil ablate -c exp.cfg
    ltcil report OUTPUT_DIR

Exit codes: 0 success, 1 configuration error, 2 runtime failure,
3 partial ablation failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import nn
from .config import KEYS, ConfigError, ExperimentConfig, load_config, parse_pairs
from .data import (
    build_profile, generate_dataset, read_dataset_csv, split_tasks, write_dataset_csv,
    write_profile_json,
)
from .experiment import config_hash, run_experiment
from .metrics import (
    atomic_write, emit_figure_data, read_report_json, write_report_json, write_trace_csv,
)
from .schedule import KINDS
from .trainer import TrainingDivergedError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "LTCIL_OUTPUT_ROOT"

logger = logging.getLogger("ltcil")


def output_root(config: ExperimentConfig) -> Path:
    if config.output_dir:
        return Path(config.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "ltcil-out"))


def load_dataset(config: ExperimentConfig, seed: int):
    if config.dataset:
        return read_dataset_csv(config.dataset)
    profile = build_profile(config.num_classes, config.n_max, config.rho)
    return generate_dataset(config.synthetic_spec(seed), profile)


def run_one(config: ExperimentConfig, seed: int, out_dir, extra_meta=None):
    """Train one (config, seed) cell and write report, trace and model snapshot."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(config, seed)
    stream = split_tasks(dataset, config.num_tasks, config.protocol, config.scenario, seed)
    meta = {"config_hash": config_hash(config), **(extra_meta or {})}
    try:
        report, est = run_experiment(stream, config.train_config(seed), config.thresholds(),
                                     metadata=meta, return_estimator=True)
    except TrainingDivergedError as exc:
        state = dict(exc.state)
        atomic_write(out_dir / "diverged_model.bin", state.pop("model"), mode="wb")
        atomic_write(out_dir / "diagnostic.json",
                     json.dumps({"error": str(exc), **state}, indent=2, sort_keys=True) + "\n")
        raise
    write_report_json(report, out_dir / "report.json")
    write_trace_csv(report.grad_trace, out_dir / "trace.csv")
    atomic_write(out_dir / "model.bin", nn.dumps_model(est.model_), mode="wb")
    return report


def _run_cell(args):
    config, seed, out_dir, meta = args
    try:
        return run_one(config, seed, out_dir, meta).overall_accuracy, None
    except Exception:  # recorded per cell; the grid keeps going
        return None, traceback.format_exc()


def _map(fn, items, jobs):
    if jobs <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def cmd_generate(config: ExperimentConfig, args) -> int:
    root = output_root(config)
    root.mkdir(parents=True, exist_ok=True)
    profile = build_profile(config.num_classes, config.n_max, config.rho)
    for seed in config.seeds:
        ds = generate_dataset(config.synthetic_spec(seed), profile)
        write_dataset_csv(ds, root / f"dataset_seed{seed}.csv")
        write_profile_json(ds.class_counts, root / f"profile_seed{seed}.json")
        counts = list(ds.class_counts.values())
        print(f"seed {seed}: {len(ds.y_train)} train / {len(ds.y_test)} test samples, "
              f"imbalance ratio {max(counts) / min(counts):.4g}")
    return EXIT_OK


def cmd_run(config: ExperimentConfig, args) -> int:
    root = output_root(config)
    root.mkdir(parents=True, exist_ok=True)
    atomic_write(root / "config.cfg", config.dumps())
    cells = [(config, s, root / f"seed_{s}", None) for s in config.seeds]
    if args.jobs <= 1:
        for c in cells:
            try:
                report = run_one(*c)
            except TrainingDivergedError as exc:
                print(f"error: {exc}; diagnostic written to {c[2]}", file=sys.stderr)
                return EXIT_RUNTIME
            print(f"seed {c[1]}: accuracy {report.overall_accuracy:.4f} "
                  f"groups {report.group_accuracy}")
        return EXIT_OK
    results = _map(_run_cell, cells, args.jobs)
    failed = False
    for (_, seed, _, _), (acc, err) in zip(cells, results):
        if err:
            failed = True
            print(f"seed {seed} failed:\n{err}", file=sys.stderr)
        else:
            print(f"seed {seed}: accuracy {acc:.4f}")
    return EXIT_RUNTIME if failed else EXIT_OK


def ablation_table(reports) -> tuple[list[str], list[str], dict]:
    """Median overall accuracy per (variant, column) from raw cell reports."""
    cells: dict[tuple[str, str], list[float]] = {}
    for r in reports:
        cells.setdefault((r.metadata["variant"], r.metadata["cell"]), []).append(r.overall_accuracy)
    rows = sorted({v for v, _ in cells}, key=_variant_key)
    cols = sorted({c for _, c in cells})
    return rows, cols, {k: float(np.median(v)) for k, v in cells.items()}


def _variant_key(label: str):
    kind = label.split("+", 1)[0]
    return (KINDS.index(kind) if kind in KINDS else len(KINDS), label)


def _table_csv(rows, cols, medians) -> str:
    lines = [",".join(["variant", *cols])]
    for v in rows:
        vals = [repr(medians[(v, c)]) if (v, c) in medians else "" for c in cols]
        lines.append(",".join([v, *vals]))
    return "\n".join(lines) + "\n"


def cmd_ablate(config: ExperimentConfig, args) -> int:
    root = output_root(config)
    root.mkdir(parents=True, exist_ok=True)
    atomic_write(root / "config.cfg", config.dumps())
    jobs = []
    for variant, column, cell in config.ablation_cells():
        cell_dir = root / "cells" / variant / column.replace("/", "_")
        meta = {"variant": variant, "cell": column}
        jobs.extend((cell, s, cell_dir / f"seed_{s}", meta) for s in config.seeds)
    results = _map(_run_cell, jobs, args.jobs)
    failures = 0
    reports = []
    for (cell, seed, out_dir, meta), (acc, err) in zip(jobs, results):
        if err:
            failures += 1
            out_dir.parent.mkdir(parents=True, exist_ok=True)
            atomic_write(out_dir.parent / f"failed_seed_{seed}.txt", err)
            print(f"{meta['variant']} {meta['cell']} seed {seed} failed", file=sys.stderr)
        else:
            reports.append(read_report_json(out_dir / "report.json"))
    rows, cols, medians = ablation_table(reports)
    atomic_write(root / "ablation.csv", _table_csv(rows, cols, medians))
    print(_table_csv(rows, cols, medians), end="")
    if failures == len(jobs):
        return EXIT_RUNTIME
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.directory)
    paths = sorted(root.rglob("report.json"))
    if not paths:
        print(f"error: no report.json under {root}", file=sys.stderr)
        return EXIT_RUNTIME
    reports = []
    for p in paths:
        r = read_report_json(p)
        reports.append(r)
        emit_figure_data(r.grad_trace, p.parent / "grad_norms.svg")
        emit_figure_data(r.grad_trace, p.parent / "grad_norms.csv")
    if all("variant" in r.metadata for r in reports):
        rows, cols, medians = ablation_table(reports)
        atomic_write(root / "ablation.csv", _table_csv(rows, cols, medians))
    print(f"rendered {len(paths)} report(s) under {root}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ltcil", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (("generate", "write synthetic datasets and profiles"),
                        ("run", "train and evaluate one configuration per seed"),
                        ("ablate", "run the schedule / GCR / reweighting grid")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("-c", "--config", help="key = value configuration file")
        p.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key")
        p.add_argument("--print-config", action="store_true",
                       help="print the fully resolved configuration and exit")
        p.add_argument("--jobs", type=int, default=1)
        for key in KEYS:
            p.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, default=None)
    p = sub.add_parser("report", help="re-render figures and tables from stored reports")
    p.add_argument("directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if args.command == "report":
        return cmd_report(args)
    try:
        pairs = []
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            pairs.append(tuple(item.split("=", 1)))
        pairs += [(k, getattr(args, "cfg_" + k)) for k in KEYS
                  if getattr(args, "cfg_" + k) is not None]
        config = load_config(args.config, parse_pairs(pairs))
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.print_config:
        print(config.dumps(), end="")
        return EXIT_OK
    try:
        return {"generate": cmd_generate, "run": cmd_run, "ablate": cmd_ablate}[args.command](config, args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
