#!/usr/bin/env python3
""" forcelab: compactly supported forces that make small Navier-Stokes flows rapidly dissipative

    forcelab.py simulate   --config configs/reference-2d.ini --out runs/ref
    forcelab.py synthesize --config configs/reference-2d.ini --override data.amplitude=0.05
    forcelab.py diagnose   --out runs/ref
    forcelab.py sweep      --config configs/reference-2d.ini --key data.amplitude --values 0.01,0.02,0.05
    forcelab.py oracle     --config configs/reference-2d.ini
    forcelab.py calibrate  --config configs/reference-2d.ini --values 0.01,0.05,0.1 --calibration-out cal.json

    FORCELAB_THREADS sets the number of FFT worker threads.
"""

import argparse
import json
import logging
import sys

import jsonschema

from diagnostics import WindowError
from experiment import ExperimentConfig, calibrate, diagnose, oracle, run_experiment, sweep
from force_synthesis import BoxTooSmallError, DegenerateProfileError, InsufficientHorizonError, SynthesisDivergence
from mild_solver import SmallnessViolation
from spectral_core import LocalizationError, ResolutionError
from utils import configure_logging

logger = logging.getLogger("forcelab")

MODULE_ERRORS = (LocalizationError, ResolutionError, DegenerateProfileError, BoxTooSmallError, WindowError,
                 SmallnessViolation, InsufficientHorizonError, SynthesisDivergence, FileNotFoundError,
                 FileExistsError, jsonschema.ValidationError, ValueError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forcelab", description=__doc__.split("\n")[0].strip())
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment configuration (INI)")
    common.add_argument("--out", help="run directory, overrides output.directory")
    common.add_argument("--seed", type=int, help="data seed, overrides data.seed")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="section.key=value, repeatable")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("simulate", parents=[common], help="solve without force and report")
    commands.add_parser("synthesize", parents=[common], help="full synthesis loop and reports")
    commands.add_parser("diagnose", parents=[common], help="recompute reports of a stored run")
    sweep_parser = commands.add_parser("sweep", parents=[common], help="one run per value of a config key")
    sweep_parser.add_argument("--key", default="data.amplitude", help="section.key to vary")
    sweep_parser.add_argument("--values", required=True, help="comma separated values")
    sweep_parser.add_argument("--workers", type=int, help="concurrent runs")
    commands.add_parser("oracle", parents=[common], help="Picard against integrator, heat flow against exact")
    calibrate_parser = commands.add_parser("calibrate", parents=[common], help="measure calibration constants")
    calibrate_parser.add_argument("--values", required=True, help="comma separated amplitudes")
    calibrate_parser.add_argument("--calibration-out", required=True, help="new calibration file")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = list(args.override)
    if args.out:
        overrides.append(f"output.directory={args.out}")
    if args.seed is not None:
        overrides.append(f"data.seed={args.seed}")
    return cfg.with_overrides(overrides) if overrides else cfg


def _values(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


def _sweep_values(text: str):
    """Integers stay integers and words stay words, so data.seed and data.kind can be swept too."""
    values = []
    for v in (v.strip() for v in text.split(",") if v.strip()):
        try:
            values.append(int(v))
        except ValueError:
            try:
                values.append(float(v))
            except ValueError:
                values.append(v)
    return values


def run(args) -> int:
    if args.command == "diagnose":
        if not args.out:
            raise ValueError("diagnose needs --out naming a completed run directory")
        manifest = diagnose(args.out)
        logger.info(f"reports of {args.out} recomputed, {len(manifest.artifacts)} artifacts")
        return 0
    cfg = load_config(args)
    if args.command == "simulate":
        run_experiment(cfg, synthesize_force=False)
    elif args.command == "synthesize":
        run_experiment(cfg, synthesize_force=True)
    elif args.command == "sweep":
        results = sweep(cfg, args.key, _sweep_values(args.values), args.workers)
        failed = [value for value, manifest in results.items() if manifest is None]
        if failed:
            logger.error(f"{len(failed)} of {len(results)} runs failed: {failed}")
            return 1
    elif args.command == "oracle":
        report = oracle(cfg)
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0 if report["passed"] else 1
    elif args.command == "calibrate":
        calibration = calibrate(cfg, _values(args.values), args.calibration_out)
        print(json.dumps(calibration.to_dict(), indent=2, sort_keys=True))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return run(args)
    except MODULE_ERRORS as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
