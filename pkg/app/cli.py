"""Command line entry point: python -m app.cli <run|converge|trace|perf|speedup|snapshots> [options]"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import sentry_sdk
from pydantic import ValidationError

from app.config import settings
from app.dtos.dtos import ExperimentConfig, StudyAxis
from app.exceptions import ExperimentConfigError, SolverError, get_error_details, get_root_cause_message
from app.services.experiments import ExperimentRunner

logger = logging.getLogger(__name__)

SUBCOMMAND_STUDIES = {
    "run": StudyAxis.SINGLE_RUN,
    "trace": StudyAxis.PARAREAL_TRACE,
    "perf": StudyAxis.PERF,
    "speedup": StudyAxis.SPEEDUP,
    "snapshots": StudyAxis.SINGLE_RUN,
}

# flag name -> config field
OVERRIDES = {
    "problem": "problem",
    "scheme": "scheme",
    "workers": "workers",
    "output_dir": "output_dir",
    "k_max": "k_max",
    "tol": "tol",
    "quadrature_points": "quadrature_points",
    "seed": "seed",
}


def configure_logging() -> None:
    logging.basicConfig(
        level=settings.LOG_LEVEL,
        format='%(asctime)s - %(name)s - %(levelname)s - %(filename)s:%(funcName)s:%(lineno)d - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )
    if settings.SENTRY_DSN:
        sentry_sdk.init(dsn=settings.SENTRY_DSN, environment=settings.ENVIRONMENT)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peife",
        description="Parareal exponential-integrator finite element experiments for u_t = D Lap(u) + f.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config; flags below override its values")
    common.add_argument("--problem", help="Built-in problem label (ex1d, ex2d, ex3d, oscillating)")
    common.add_argument("--scheme", choices=["eife", "peife"])
    common.add_argument("--workers", type=int, help=f"Fine sweep worker count (default: PEIFE_WORKERS={settings.PEIFE_WORKERS})")
    common.add_argument("--output-dir", dest="output_dir", help="Directory for CSV output")
    common.add_argument("--k-max", dest="k_max", type=int, help="Parareal iteration budget")
    common.add_argument("--tol", type=float, help="Increment tolerance; 0 runs the full budget")
    common.add_argument("--quadrature-points", dest="quadrature_points", type=int, help="Gauss points per direction")
    common.add_argument("--seed", type=int, help="Recorded with the run; the solver is deterministic")

    subparsers.add_parser("run", parents=[common], help="One scheme at one resolution")
    converge = subparsers.add_parser("converge", parents=[common], help="Spatial or temporal convergence table")
    converge.add_argument("--axis", choices=["spatial", "temporal"], help="Refinement axis")
    subparsers.add_parser("trace", parents=[common], help="Error against Parareal iteration count")
    subparsers.add_parser("perf", parents=[common], help="Time per Parareal iteration on growing grids")
    subparsers.add_parser("speedup", parents=[common], help="Sequential EIFE against PEIFE wall time and error")
    snapshots = subparsers.add_parser("snapshots", parents=[common], help="Nodal solution values at given times")
    snapshots.add_argument("--times", type=float, nargs="+", help="Snapshot times within [t0, T]")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    data: Dict[str, Any] = {}
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ExperimentConfigError(f"Cannot read config {args.config}: {e}") from e
        if not isinstance(data, dict):
            raise ExperimentConfigError(f"Config {args.config} must hold a JSON object")

    for flag, field in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[field] = value

    if args.command == "converge":
        axis = args.axis or data.get("study")
        if axis not in (StudyAxis.SPATIAL.value, StudyAxis.TEMPORAL.value):
            raise ExperimentConfigError("converge needs --axis spatial|temporal or a matching 'study' in the config")
        data["study"] = axis
    else:
        data["study"] = SUBCOMMAND_STUDIES[args.command].value
    if args.command == "snapshots" and args.times:
        data["snapshot_times"] = args.times

    try:
        return ExperimentConfig(**data)
    except ValidationError as e:
        raise ExperimentConfigError(f"Invalid experiment config: {e}") from e


def execute(args: argparse.Namespace) -> List[str]:
    config = load_config(args)
    runner = ExperimentRunner(config)
    if args.command == "snapshots":
        return [str(p) for p in runner.emit_snapshots()]
    _, files = runner.run()
    return files


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        for path in execute(args):
            print(path)
        return 0
    except SolverError as e:
        logger.error(f"{args.command} failed: {get_root_cause_message(e)}")
        print(json.dumps(get_error_details(e)), file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}: {get_root_cause_message(e)}")
        print(json.dumps(get_error_details(e)), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
