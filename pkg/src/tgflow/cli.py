"""Command-line interface over the experiment pipeline.

Every subcommand resolves one configuration document (a YAML file or a
built-in name), applies ``--set`` overrides, and drives the matching
pipeline stage.  Numbers print at 6 significant digits; the emitted
files keep full precision.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import config as cfg
from . import experiment, plotting
from .experiment import STAGES, StageError


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (cfg.ConfigError, StageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tgflow",
        description="surrogate pipeline for 2D transient groundwater flow "
                    "with a random conductivity field")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name, help_text, handler):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default="desk/base",
                       help="YAML path or built-in name; built-ins: "
                            + ", ".join(experiment.builtin_names()))
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override a config key, dotted path (repeatable)")
        p.add_argument("--out", default="runs", help="output root directory")
        p.add_argument("--seed", type=int, default=None,
                       help="replace the config's master seed")
        p.add_argument("--dry-run", action="store_true",
                       help="print the resolved plan without executing")
        p.add_argument("--deterministic", action="store_true",
                       help="force serial execution (sweep worker cap 1)")
        p.add_argument("--build-deps", action="store_true",
                       help="build missing upstream stages instead of failing")
        p.set_defaults(handler=handler)
        return p

    add("kle-inspect", "field basis eigenvalues and energy curve",
        _cmd_kle_inspect)
    add("simulate", "one solver run on one sampled field", _cmd_simulate)
    add("gen-data", "labeled heads from solver runs", _stage_command("data"))
    add("train", "collocation sampling and network training",
        _stage_command("train"))
    add("uq", "Monte Carlo moments and accuracy metrics", _stage_command("uq"))
    add("report", "SVG plots for a finished run", _stage_command("report"))
    add("transfer", "fine-tune a composite surrogate at a new variance",
        _cmd_transfer)
    p = add("sweep", "one pipeline run per value along an axis", _cmd_sweep)
    p.add_argument("--axis", required=True, choices=experiment.SWEEP_AXES,
                   help="config axis to vary")
    p.add_argument("--values", required=True,
                   help="comma-separated numbers, one run each")
    p.add_argument("--workers", type=int, default=None,
                   help="concurrent points (default $TGFLOW_WORKERS or 1)")
    return parser


def _load_document(args) -> dict:
    name = args.config
    if os.path.exists(name):
        doc = cfg.load_config(name)
    else:
        doc = experiment.builtin_config(name)
    doc = cfg.apply_overrides(doc, args.overrides)
    if args.seed is not None:
        doc["seed"] = args.seed
    experiment.validate_document(doc)
    return doc


def _print_plan(doc, args, target, extra=()):
    status = experiment.stage_status(doc, args.out)
    print(f"config {doc['name']}, hash {cfg.short_hash(doc)}")
    print(f"run directory {experiment.run_directory(doc, args.out)}")
    for stage in STAGES[:STAGES.index(target) + 1]:
        state = "cached" if status[stage] == "built" else "pending"
        print(f"  {stage}: {state}")
    for line in extra:
        print(f"  {line}")


def _check_upstream(doc, args, target):
    if args.build_deps:
        return
    status = experiment.stage_status(doc, args.out)
    missing = [s for s in STAGES[:STAGES.index(target)]
               if status[s] == "missing"]
    if missing:
        raise StageError(target, "missing upstream stages: "
                                 + ", ".join(missing)
                                 + "; build them first or pass --build-deps")


def _stage_command(target):
    def handler(args):
        doc = _load_document(args)
        if args.dry_run:
            _print_plan(doc, args, target)
            return 0
        _check_upstream(doc, args, target)
        experiment.run_pipeline(doc, args.out, through=target, echo=print)
        return 0
    return handler


def _cmd_kle_inspect(args) -> int:
    doc = _load_document(args)
    if args.dry_run:
        _print_plan(doc, args, "kle")
        return 0
    manifest = experiment.run_pipeline(doc, args.out, through="kle", echo=print)
    kle_dir = os.path.join(manifest.run_dir, "kle")
    table = np.loadtxt(os.path.join(kle_dir, "energy.csv"), delimiter=",",
                       skiprows=1, ndmin=2)
    print(f"{'n':>5} {'eigenvalue':>14} {'energy':>10}")
    for n, lam, frac in table:
        print(f"{int(n):>5} {lam:>14.6g} {frac:>10.6g}")
    plot_path = os.path.join(kle_dir, "energy.svg")
    plotting.line_plot(plot_path,
                       [{"label": "retained fraction", "x": table[:, 0],
                         "y": table[:, 2]}],
                       title="field basis energy", xlabel="modes",
                       ylabel="cumulative fraction")
    print(f"energy curve at {plot_path}")
    return 0


def _cmd_simulate(args) -> int:
    doc = _load_document(args)
    if args.dry_run:
        status = "cached" if os.path.exists(os.path.join(
            experiment.run_directory(doc, args.out), "simulate",
            "stage.json")) else "pending"
        _print_plan(doc, args, "kle", extra=[f"simulate: {status}"])
        return 0
    sim_dir = experiment.run_single_simulation(doc, args.out, echo=print)
    print(f"artifacts at {sim_dir}")
    return 0


def _cmd_transfer(args) -> int:
    doc = _load_document(args)
    if args.dry_run:
        _print_plan(doc, args, "train",
                    extra=[f"transfer at variance "
                           f"{doc['transfer']['variance']:g}"])
        return 0
    summary = experiment.run_transfer(doc, args.out,
                                      build_deps=args.build_deps, echo=print)
    print(f"variance r2 {summary['r2_variance_before']:.6g} -> "
          f"{summary['r2_variance_after']:.6g} at "
          f"sigma2 {summary['variance']:.6g}")
    return 0


def _cmd_sweep(args) -> int:
    doc = _load_document(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise cfg.ConfigError(f"--values must be comma-separated numbers, "
                              f"got {args.values!r}") from None
    if not values:
        raise cfg.ConfigError("sweep needs at least one value")
    key = experiment.sweep_key(doc, args.axis)
    if args.dry_run:
        print(f"config {doc['name']}, axis {args.axis} -> {key}")
        print(f"values {', '.join('%.6g' % v for v in values)}")
        print(f"summary {experiment.sweep_summary_path(doc, args.axis, args.out)}")
        return 0
    workers = 1 if args.deterministic else args.workers
    _manifests, rows = experiment.sweep(doc, args.axis, values, args.out,
                                        workers=workers, echo=print)
    print(f"{key:>24} {'r2 mean':>10} {'r2 var':>10}  run")
    for row in rows:
        if row["status"] == "ok":
            print(f"{row['value']:>24.6g} {row['r2_mean']:>10.6g} "
                  f"{row['r2_variance']:>10.6g}  {row['run']}")
        else:
            print(f"{row['value']:>24.6g} {row['status']}")
    return 0 if all(row["status"] == "ok" for row in rows) else 1
