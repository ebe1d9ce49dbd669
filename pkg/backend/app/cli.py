"""
Command-line entry point.

Each pipeline subcommand runs that one pipeline from an optional YAML config
with command-line overrides on top; ``report`` runs every pipeline the config
lists. The process exits nonzero when a check or a pipeline fails.

Usage
-----
    python -m app.cli dual-check --preset axes --L 4
    python -m app.cli greenkubo --config app/data/experiments/reference_spec.yaml --replicas 64
    python -m app.cli resolvent --L 6 --lambda 0.1 --n 3 --hardcore true --out output/res
    python -m app.cli bound --lambdas 1e-4:1e-30:geometric --C1 1.0
    python -m app.cli dispersion-kappa --umin 1e-12
    python -m app.cli report --config app/data/experiments/bound_scaling.yaml --format text
"""
import argparse
import logging
import math
import sys
from typing import Any, Dict, List, Optional

from app.core.exceptions import BaseAppException, ConfigValidationError
from app.schemas.experiment import PIPELINES, load_experiment
from app.services.harness_service import emit_report, exit_code, run_experiment
from app.services.spectral_bound_service import geometric_lambdas

logger = logging.getLogger(__name__)

# Grid points per decade for "start:stop:geometric" lambda ranges
LAMBDAS_PER_DECADE = 1


def setup_logging(verbose: bool = False) -> None:
    """Send app.* logs to stderr so stdout carries only the report."""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))

    app_logger = logging.getLogger("app")
    app_logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    app_logger.handlers = [handler]
    app_logger.propagate = False


def parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"Expected true or false, got '{text}'")


def parse_lambdas(text: str) -> List[float]:
    """Comma list ``0.5,0.2,0.1`` or decreasing range ``1e-4:1e-30:geometric``."""
    try:
        if ":" in text:
            start, stop, kind = text.split(":")
            if kind != "geometric":
                raise ValueError(f"unknown spacing '{kind}'")
            start_value, stop_value = float(start), float(stop)
            decades = abs(round(math.log10(start_value / stop_value)))
            return geometric_lambdas(start_value, stop_value, max(2, decades * LAMBDAS_PER_DECADE + 1))
        return [float(x) for x in text.split(",") if x.strip()]
    except (ValueError, BaseAppException) as e:
        raise argparse.ArgumentTypeError(f"Bad lambda grid '{text}': {e}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lattice-gas",
        description="Velocity lattice gas toolkit. LATTICE_THREADS sets the worker count.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--preset", help="Velocity preset (axes or cube)")
    common.add_argument("--L", type=int, dest="L", help="Torus side")
    common.add_argument("--gamma", type=float)
    common.add_argument("--theta", type=lambda s: [float(x) for x in s.split(",")], help="theta_1,theta_2")
    common.add_argument("--r", type=lambda s: [float(x) for x in s.split(",")], help="r_0,r_1,r_2")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", dest="output_dir", help="Output directory")
    common.add_argument("--formats", type=lambda s: s.split(","), help="csv,json,xlsx")
    common.add_argument("--strict", action="store_true", help="Raise on the first pipeline failure")
    common.add_argument("--verbose", "-v", action="store_true", help="DEBUG logging")

    monte_carlo = argparse.ArgumentParser(add_help=False)
    monte_carlo.add_argument("--T", type=float, dest="T", help="Last sample time")
    monte_carlo.add_argument("--replicas", type=int)
    monte_carlo.add_argument("--per-octave", type=int, dest="per_octave")

    subparsers.add_parser("simulate", parents=[common, monte_carlo], help="Density and conservation run")

    greenkubo = subparsers.add_parser("greenkubo", parents=[common, monte_carlo], help="C(t), D(t), Laplace")
    greenkubo.add_argument("--lambdas", type=parse_lambdas, help="Laplace parameters")

    subparsers.add_parser("dual-check", parents=[common], help="Exact identity suite")

    resolvent = subparsers.add_parser("resolvent", parents=[common], help="Truncated resolvents")
    resolvent.add_argument("--lambda", type=parse_lambdas, dest="resolvent_lambdas", help="lambda or list")
    resolvent.add_argument("--n", type=lambda s: [int(x) for x in s.split(",")], dest="degrees")
    resolvent.add_argument("--hardcore", type=parse_bool)
    resolvent.add_argument("--collision", choices=["Lc1", "Qn"])
    resolvent.add_argument("--tol", type=float, dest="cg_tolerance")

    bound = subparsers.add_parser("bound", parents=[common], help="Degree-3 bound profile")
    bound.add_argument("--lambdas", type=parse_lambdas, dest="bound_lambdas")
    bound.add_argument("--C1", type=float, dest="C1")
    bound.add_argument("--epsilon", type=float)

    kappa = subparsers.add_parser("dispersion-kappa", parents=[common], help="Dispersion exponent")
    kappa.add_argument("--umin", type=float, dest="u_min")
    kappa.add_argument("--umax", type=float, dest="u_max")
    kappa.add_argument("--iterations", type=int, dest="kappa_iterations")
    kappa.add_argument("--epsilon", type=float)

    report = subparsers.add_parser("report", parents=[common], help="Run the config's pipelines")
    report.add_argument("--format", choices=["text", "json"], default="text", dest="report_format")
    return parser


CONTROL_KEYS = {"command", "config", "strict", "verbose", "report_format"}


def overrides_from(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {k: v for k, v in vars(args).items() if k not in CONTROL_KEYS and v is not None}
    if args.command in PIPELINES:
        overrides["pipelines"] = [args.command]
    return overrides


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)

    try:
        config = load_experiment(args.config, **overrides_from(args))
    except ConfigValidationError as e:
        logger.error(f"Invalid config ({e.invariant}): {e.message}")
        return 2
    except OSError as e:
        logger.error(f"Cannot read config: {e}")
        return 2

    try:
        report = run_experiment(config, strict=args.strict)
    except BaseAppException as e:
        logger.error(f"{e.message} ({e.details})")
        return 1

    print(emit_report(report, getattr(args, "report_format", "text")), end="")
    return exit_code(report)


if __name__ == "__main__":
    sys.exit(main())
