import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from flowguide.errors import ConfigError, FlowGuideError
from flowguide.experiment_runner import COMMANDS, ExperimentRunner
from flowguide.loader import RunConfig, apply_overrides, load_run_config

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_FAILURE = 3


def cmd_gen_data(config: RunConfig) -> None:
    """
    Generate the toy dataset (and optional held-out split) into ``config.out_dir``.

    This is a convenience wrapper around the ExperimentRunner class.
    For more control, use ExperimentRunner directly.
    """
    ExperimentRunner(config).run("gen-data")


def cmd_fit(config: RunConfig) -> None:
    """Fit every denoiser on the generated dataset and write ``models.json``."""
    ExperimentRunner(config).run("fit")


def cmd_sample(config: RunConfig) -> None:
    """Sample with ``config.guidance`` and write ``samples.jsonl`` and ``report.json``."""
    ExperimentRunner(config).run("sample")


def cmd_sweep_formats(config: RunConfig, best_effort: bool = False) -> None:
    ExperimentRunner(config).run("sweep-formats", best_effort=best_effort)


def cmd_hierarchy(config: RunConfig, best_effort: bool = False) -> None:
    ExperimentRunner(config).run("hierarchy", best_effort=best_effort)


def cmd_tune(config: RunConfig) -> None:
    """Bayesian-optimize the guidance weights of ``config.guidance.method``."""
    ExperimentRunner(config).run("tune")


def cmd_benchmark(config: RunConfig, best_effort: bool = False) -> None:
    """
    Compare methods at tuned weights.

    Writes benchmark.csv, radar.csv, findings.csv, reports.json and benchmark.md.
    """
    ExperimentRunner(config).run("benchmark", best_effort=best_effort)


COMMAND_HANDLERS = {
    "gen-data": cmd_gen_data,
    "fit": cmd_fit,
    "sample": cmd_sample,
    "sweep-formats": cmd_sweep_formats,
    "hierarchy": cmd_hierarchy,
    "tune": cmd_tune,
    "benchmark": cmd_benchmark,
}
BEST_EFFORT_COMMANDS = ("sweep-formats", "hierarchy", "benchmark")


# =============================================================================
# CLI Utilities
# =============================================================================


def _common_arguments() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=str, help="Run config file (YAML or JSON)")
    common.add_argument("-o", "--out", type=str, help="Output directory")
    common.add_argument("--seed", type=int, help="Seed of the command's random stream")
    common.add_argument(
        "--steps",
        type=str,
        help="Euler steps; benchmark accepts a comma-separated ablation list (e.g. 50,100,250)",
    )
    common.add_argument("--eta", type=float, help="Remasking stochasticity")
    common.add_argument(
        "--method", choices=["vanilla", "cfg", "ag", "mg", "pg"], help="Guidance method"
    )
    common.add_argument(
        "--format",
        choices=["linear-prob", "log-prob", "linear-rate", "log-rate"],
        help="Discrete guidance format",
    )
    common.add_argument("--w1", type=float, help="Guidance weight on positions")
    common.add_argument("--w2", type=float, help="Guidance weight on the discrete modalities")
    common.add_argument(
        "--weights",
        type=float,
        nargs="+",
        metavar="N_OR_W",
        help="Weight count 2 or 4 (tune: tuned dimensions), optionally followed by that "
        "many weights, e.g. --weights 4 2.0 1.5 1.0 1.5",
    )
    common.add_argument(
        "--count", type=int, help="Molecules to generate (gen-data) or sample (others)"
    )
    common.add_argument(
        "--split", type=float, help="gen-data: fraction kept for fitting; the rest is held out"
    )
    common.add_argument(
        "--best-effort",
        action="store_true",
        help="Continue sweeps and benchmarks when a cell fails (logs errors but doesn't stop)",
    )
    return common


def create_base_parser(
    description: str = "Guided flow-matching sampling lab on a toy molecular domain",
    prog: str = "flowguide",
) -> argparse.ArgumentParser:
    """Create the argument parser with one subcommand per experiment step.

    Settings resolve as built-in defaults < config file < command-line flags.

    Args:
        description: CLI description for help text
        prog: Program name for help text

    Returns:
        Configured ArgumentParser
    """
    parser = argparse.ArgumentParser(
        description=description,
        prog=prog,
        epilog="Precedence: built-in defaults < --config file < command-line flags.",
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands", required=True)
    common = _common_arguments()
    helps = {
        "gen-data": "Generate the toy dataset",
        "fit": "Fit posterior, velocity, guide and model-guidance models",
        "sample": "Sample molecules with the configured guidance",
        "sweep-formats": "CFG weight grid for each discrete guidance format",
        "hierarchy": "Continuous-only, discrete-only and hybrid guidance curves",
        "tune": "Bayesian-optimize the guidance weights",
        "benchmark": "Compare methods at tuned weights",
    }
    for command in COMMANDS:
        subparsers.add_parser(command, parents=[common], help=helps[command])
    return parser


def _steps(value: str | None) -> list[int] | None:
    if value is None:
        return None
    try:
        return [int(s) for s in value.split(",") if s.strip()]
    except ValueError as e:
        raise ConfigError(f"--steps expects integers, got '{value}'") from e


def _weights(values: list[float] | None) -> tuple[int | None, tuple[float, ...] | None]:
    """Split ``--weights N [W ...]`` into the weight count and the optional weights."""
    if values is None:
        return None, None
    count, rest = values[0], values[1:]
    if count not in (2, 4):
        raise ConfigError(f"--weights expects a count of 2 or 4, got {count:g}")
    if rest and len(rest) != count:
        raise ConfigError(f"--weights {count:g} expects {count:g} weights, got {len(rest)}")
    return int(count), tuple(rest) or None


def collect_overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Map parsed flags onto dotted config fields; unset flags map to ``None``."""
    steps = _steps(args.steps)
    n_weights, explicit = _weights(args.weights)
    command = args.command
    overrides: dict[str, Any] = {
        "out_dir": args.out,
        "sampling.eta": args.eta,
        "guidance.method": args.method,
        "guidance.discrete_format": args.format.replace("-", "_") if args.format else None,
        "tune.n_weights": n_weights,
    }
    if steps is not None:
        overrides["sampling.steps"] = steps[0]
        if command == "benchmark":
            overrides["benchmark.steps_ablation"] = steps

    if explicit is not None:
        if args.w1 is not None or args.w2 is not None:
            raise ConfigError("--weights with values cannot be combined with --w1/--w2")
        overrides["guidance.weights"] = explicit
    elif args.w1 is not None or args.w2 is not None:
        w1 = 1.0 if args.w1 is None else args.w1
        w2 = 1.0 if args.w2 is None else args.w2
        overrides["guidance.weights"] = (w1, w2)
        if args.method == "mg":
            overrides["guidance.mg_weight"] = w1

    if command == "gen-data":
        overrides["dataset.seed"] = args.seed
        overrides["dataset.count"] = args.count
        overrides["dataset.split"] = args.split
    elif command == "fit":
        overrides["models.mg.seed"] = args.seed
    elif command == "tune":
        overrides["tune.seed"] = args.seed
        overrides["tune.eval_count"] = args.count
    else:
        overrides["sampling.seed"] = args.seed
        overrides["sampling.count"] = args.count
    return overrides


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(Path(args.config) if args.config else None)
    return apply_overrides(config, collect_overrides(args))


# =============================================================================
# Main CLI Entry Point
# =============================================================================


def run_cli(argv: list[str] | None = None) -> int:
    """Parse ``argv``, run one command and return the process exit code."""
    parser = create_base_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
        handler = COMMAND_HANDLERS[args.command]
        if args.command in BEST_EFFORT_COMMANDS:
            handler(config, best_effort=args.best_effort)
        else:
            handler(config)
    except (ConfigError, ValidationError, FileNotFoundError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR
    except (FlowGuideError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_RUNTIME_FAILURE
    return 0


def main() -> None:
    program_start_time = time.time()
    code = run_cli()

    # Calculate and log total program execution time
    total_program_time = time.time() - program_start_time
    logger.info(f"Total execution time: {total_program_time:.2f} seconds")
    sys.exit(code)
