"""Command-line driver: subcommands map one-to-one to experiment runners.

Exit codes: 0 on success, 2 for configuration problems, 3 when a run
finished but a requested tolerance was not met within its iteration
budget (outputs are still written), 4 for numerical defects.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiments
from .errors import (
    ConfigurationError,
    DegenerateLikelihoodError,
    InsufficientSamplesError,
    InvalidParameterError,
    NumericalDefectError,
)

EXIT_SUCCESS = 0
EXIT_CONFIG_ERROR = 2
EXIT_TOLERANCE_NOT_MET = 3
EXIT_NUMERICAL_DEFECT = 4

COMMANDS = {
    "propagate": (
        experiments.run_propagate,
        "train the variate basis and map mean/variance over the lambda grid",
    ),
    "holdout": (
        experiments.run_holdout,
        "evaluate a trained basis at random lambdas outside the training set",
    ),
    "bayes-toy": (
        experiments.run_bayes_toy,
        "sweep the conjugate toy posterior over hyperparameters and observations",
    ),
    "bayes-pde": (
        experiments.run_bayes_pde,
        "sweep weighted posterior expectations of the fin output",
    ),
    "breakeven": (
        experiments.run_breakeven,
        "cost-model comparison of naive MC against the reduced estimator",
    ),
    "rb-train": (
        experiments.run_rb_train,
        "train and persist the reduced space for the fin solver",
    ),
    "kl-spectrum": (
        experiments.run_kl_spectrum,
        "write the boundary-field eigenvalue spectrum and truncation point",
    ),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rbcv",
        description="Reduced-basis control-variate Monte Carlo experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument(
            "--config", type=Path, default=None,
            help="flat JSON config file; defaults apply when omitted",
        )
        cmd.add_argument("--seed", type=int, default=None, help="override the config seed")
        cmd.add_argument(
            "--out", type=Path, default=Path("runs"), help="output directory"
        )
        cmd.add_argument(
            "--workers", type=int, default=1,
            help="parallel map width; must not change any output byte",
        )
    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return EXIT_SUCCESS

    runner, _ = COMMANDS[args.command]
    try:
        if args.workers < 1:
            raise ConfigurationError(f"--workers must be >= 1, got {args.workers}")
        overrides = {"seed": args.seed} if args.seed is not None else None
        config = experiments.load_config(args.config, overrides)
        result = runner(config, args.out, args.workers)
    except (ConfigurationError, InvalidParameterError, InsufficientSamplesError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except (NumericalDefectError, DegenerateLikelihoodError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL_DEFECT
    for path in result.files:
        print(path)
    if not result.tol_met:
        print("warning: tolerance not met within the iteration budget", file=sys.stderr)
        return EXIT_TOLERANCE_NOT_MET
    return EXIT_SUCCESS


if __name__ == "__main__":
    sys.exit(main())
