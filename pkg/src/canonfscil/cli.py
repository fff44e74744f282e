"""Command-line entry points.

Verbs: ``gen`` (materialize a synthetic dataset), ``run`` (execute an
experiment), ``report`` (compare finished runs), ``gradcheck`` (verify
analytic gradients of every loss term), ``selftest`` (run the invariant
suites). All state lives under the chosen output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import tempfile

import numpy as np

from . import experiment
from .config import ConfigError, ExperimentConfig, load_config
from .training import TrainingDiverged


def _load(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return load_config(path)


def cmd_gen(args) -> int:
    cfg = _load(args.config)
    out = experiment.gen_dataset(cfg, args.out, force=args.force)
    print(f"dataset written to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _load(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    try:
        summaries = experiment.run_experiment(cfg, args.out, force=args.force)
    except TrainingDiverged as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 2
    for seed, s in sorted(summaries.items()):
        adr = "n/a" if s.average_drop_rate is None else f"{s.average_drop_rate:.4f}"
        print(f"seed {seed}: AA={s.average_accuracy:.4f} "
              f"PD={s.performance_drop:.4f} ADR={adr}")
    return 0


def cmd_report(args) -> int:
    text = experiment.report(args.run_dirs, out_path=args.out)
    print(text, end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .calibration import UncertaintyMap
    from .gradcheck_suite import run_gradcheck_suite

    cfg = _load(args.config)
    reports = run_gradcheck_suite(cfg, seed=args.seed if args.seed is not None else 0)
    ok = True
    for name, rep in reports.items():
        status = "PASS" if rep.passed else "FAIL"
        ok = ok and rep.passed
        print(f"{status} {name}: max rel err {rep.max_rel_err:.2e} "
              f"({len(rep.entries)} probes)")
    return 0 if ok else 1


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    failures = run_selftest(verbose=True)
    return 0 if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canonfscil",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset directory")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--force", action="store_true", help="overwrite non-empty target")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("run", help="run an experiment")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--seed", type=int, help="override: run only this seed")
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--force", action="store_true", help="overwrite non-empty target")
    p.add_argument("--parallel", action="store_true",
                   help="accepted for interface compatibility; seeds run sequentially")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("report", help="tabulate finished runs")
    p.add_argument("run_dirs", nargs="+", help="run directories to compare")
    p.add_argument("--out", help="also write table and curves CSV here")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of all losses")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--seed", type=int, help="probe seed")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("selftest", help="run the invariant suites")
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FileExistsError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
