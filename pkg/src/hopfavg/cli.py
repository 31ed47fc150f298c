"""Command-line driver for the pipeline stages.

Exit codes: 0 on success (validation verdict "pass"), 1 when the validation
verdict is "fail", 2 for configuration or assumption errors.
"""

from __future__ import annotations

import argparse
import sys

from .averaged import AveragedError
from .config import AssumptionError, ConfigError, load_config
from .functional_expr import ExpressionError
from .harness import (run_coeffs, run_dde_ensemble, run_limit_ensemble,
                      run_spectrum, run_validation)
from .noise import NoiseError
from .spectral import SpectralError

_STAGES = {
    "spectrum": run_spectrum,
    "coeffs": run_coeffs,
    "simulate": run_dde_ensemble,
    "limit": run_limit_ensemble,
    "validate": run_validation,
}

_CONFIG_ERRORS = (ConfigError, AssumptionError, ExpressionError, NoiseError,
                  SpectralError, AveragedError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hopfavg",
        description="Stochastic averaging pipeline for scalar delay systems "
                    "near a Hopf point.")
    sub = parser.add_subparsers(dest="stage", required=True)
    for name, help_text in (
            ("spectrum", "verify the critical pair and tabulate the basis"),
            ("coeffs", "evaluate averaged drift and diffusion coefficients"),
            ("simulate", "run noisy delay-system ensembles"),
            ("limit", "run the limit diffusion ensemble"),
            ("validate", "full pipeline with statistical comparison")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for ensemble chunks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        report = _STAGES[args.stage](cfg, args.out, seed=args.seed,
                                     n_threads=max(1, args.threads))
    except _CONFIG_ERRORS as exc:
        print(f"hopfavg {args.stage}: error: {exc}", file=sys.stderr)
        return 2
    if args.stage == "validate":
        verdict = report.get("verdict")
        print(f"validation verdict: {verdict}")
        return 0 if verdict == "pass" else 1
    print(f"{args.stage}: wrote artifacts to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
