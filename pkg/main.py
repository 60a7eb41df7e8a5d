"""
Entropic Dynamics Laboratory command line.

    python main.py <command> <file.json> [--out DIR] [--seed N] [--quiet]

Commands: maxent, evolve, sample, symmetry, gauge-check, measure, classical-limit, uncertainty.
Exit codes: 0 success, 1 runtime error, 2 infeasible/overconstrained, 3 validation failure.
"""

import argparse
import logging
import sys
from typing import Optional, Sequence

from pydantic import ValidationError

from errors import EXIT_OK, EXIT_RUNTIME_ERROR, EXIT_VALIDATION_FAILURE, LabError
from scenario import COMMANDS, require_passing, run_scenario
from settings import get_settings

logger = logging.getLogger("edlab")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

COMMAND_HELP = {
    "maxent": "maximum-entropy update of a problem file",
    "evolve": "propagate the scenario state and report conservation diagnostics",
    "sample": "trajectory ensemble against |psi|^2",
    "symmetry": "cross-frame evolution under an extended Galilean transformation",
    "gauge-check": "gauge-pair evolutions for each gauge function",
    "measure": "Born rule by overlaps, by the device unitary and by Monte Carlo",
    "classical-limit": "centre-of-mass fluctuations and the Hamilton-Jacobi gap",
    "uncertainty": "momentum variance split and the uncertainty product",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edlab", description="Entropic Dynamics Laboratory")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=None, help="output directory (default: EDLAB_OUTPUT_DIR or ./runs)")
    common.add_argument("--seed", type=int, default=None, help="random seed; overrides the file")
    common.add_argument("--quiet", action="store_true", help="log warnings and errors only")
    commands = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = commands.add_parser(name, parents=[common], help=COMMAND_HELP[name])
        sub.add_argument("path", help="problem.json" if name == "maxent" else "scenario.json")
    return parser


def configure_logging(quiet: bool) -> None:
    level = logging.WARNING if quiet else getattr(logging, get_settings().log_level.upper(), logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.quiet)
    try:
        summary = run_scenario(args.command, args.path, args.out, seed=args.seed)
        require_passing(summary)
    except ValidationError as exc:
        logger.error("invalid file %s: %s", args.path, exc)
        return EXIT_VALIDATION_FAILURE
    except LabError as exc:
        logger.error("%s failed: %s", args.command, exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("cannot access %s: %s", args.path, exc)
        return EXIT_VALIDATION_FAILURE
    except Exception:
        logger.exception("%s failed with an unexpected error", args.command)
        return EXIT_RUNTIME_ERROR

    logger.info("%s '%s' done: %d checks passed", args.command, summary.scenario, len(summary.checks))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
