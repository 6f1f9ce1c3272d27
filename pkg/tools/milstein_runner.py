#!/usr/bin/env python3
"""Command-line tool for randomised Milstein simulations and convergence studies."""
import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from settings import settings
from tools.particle_system import config, formatters, utils
from tools.particle_system.experiments import (
    StudyReport,
    consistency_study,
    moment_stability_check,
    poc_study,
    quadrature_study,
    strong_convergence_study,
)
from tools.particle_system.grid_noise import (
    default_substeps,
    make_uniform_grid,
    sample_initial,
    sample_noise,
)
from tools.particle_system.run_config import (
    SUBCOMMANDS,
    ConfigError,
    RunConfig,
    format_config,
    parse_config,
    validate_config,
)
from tools.particle_system.schemes import simulate

# Configure logging
logging.basicConfig(
    level=settings.log_level.value,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2


def setup_argparse():
    """Set up argument parser."""
    parser = argparse.ArgumentParser(
        description="Simulate interacting particle systems and run convergence studies"
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS, help="What to run")
    parser.add_argument("--config", required=True, help="Path of the run configuration")
    parser.add_argument("--seed", type=int, help="Override the configured seed")
    parser.add_argument("--workers", type=int, help="Worker threads for replicates")
    parser.add_argument(
        "--check",
        action="store_true",
        help="Exit with status 1 and write failure.json if the study fails its pass condition",
    )
    parser.add_argument("--out", help="Output directory (default: from config)")
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    return parser


def load_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read a configuration file and apply command-line overrides.

    Args:
        path (str): Configuration file.
        overrides (dict, optional): Field values replacing the configured ones.

    Returns:
        RunConfig: Validated configuration. Workers and output directory fall back
            to the application settings when neither file nor overrides set them.

    Raises:
        ConfigError: If the text or the overrides are invalid.
        OSError: If the file cannot be read.
    """
    with open(path) as f:
        run_config = parse_config(f.read())
    data = run_config.model_dump(exclude_unset=True)
    data.setdefault("workers", settings.workers)
    data.setdefault("out", settings.output_dir)
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return validate_config(data)


def _simulate(run_config: RunConfig, out: str) -> Dict[str, Any]:
    model = run_config.build_model()
    grid = make_uniform_grid(run_config.T, run_config.n)
    K = run_config.K or default_substeps(grid.h_max)
    N = run_config.N
    bundle = sample_noise(grid, N, model.m1, model.m0, K, run_config.seed, 0)
    initial = sample_initial(
        N, model.d, run_config.x0, run_config.x0_spread, run_config.seed, 0
    )
    trajectory = simulate(
        model, grid, bundle, initial, run_config.scheme, run_config.mode
    )
    if trajectory.diverged:
        logger.warning(f"Simulation diverged at step {trajectory.diverged_at}")
    path = os.path.join(out, config.TRAJECTORY_FILE)
    formatters.trajectory_frame(trajectory).to_csv(path, index=False)
    logger.info(f"Wrote trajectory to {path}")
    return {
        "files": [config.TRAJECTORY_FILE],
        "scheme": trajectory.scheme,
        "mode": trajectory.mode,
        "K": K,
        "diverged_at": trajectory.diverged_at,
        "passed": not trajectory.diverged,
    }


def run_study(
    subcommand: str, run_config: RunConfig, show_progress: bool = False
) -> StudyReport:
    """Dispatch a study subcommand to the experiments module."""
    c = run_config
    common = dict(workers=c.workers, resamples=c.bootstrap, show_progress=show_progress)
    if subcommand == "quadrature":
        return quadrature_study(
            c.integrand,
            c.T,
            c.h_levels,
            c.M,
            c.seed,
            q=c.q,
            slope_window=c.slope_window,
            **common,
        )

    model = c.build_model()
    common.update(
        x0=c.x0, x0_spread=c.x0_spread, substeps=c.K, scheme=c.scheme, mode=c.mode
    )
    if subcommand == "convergence":
        return strong_convergence_study(
            model,
            c.T,
            c.N,
            c.h_levels,
            c.M,
            c.seed,
            h_ref=c.h_ref,
            q=c.q,
            slope_window=c.slope_window,
            **common,
        )
    if subcommand == "consistency":
        return consistency_study(
            model,
            c.T,
            c.N,
            c.h_levels,
            c.h_ref,
            c.M,
            c.seed,
            reference=c.reference,
            q=c.q,
            slope_window=c.slope_window,
            **common,
        )
    if subcommand == "poc":
        return poc_study(
            model, c.T, c.T / c.n, c.N_levels, c.N_ref, c.M, c.seed, **common
        )
    return moment_stability_check(
        model, c.T, c.N, c.h_levels, c.M, c.seed, p=c.p, **common
    )


def _study(
    subcommand: str, run_config: RunConfig, out: str, show_progress: bool
) -> Dict[str, Any]:
    report = run_study(subcommand, run_config, show_progress)
    filename = config.STUDY_FILE.format(kind=subcommand)
    path = os.path.join(out, filename)
    report.to_frame().to_csv(path, index=False)
    logger.info(f"Wrote {report.kind} results to {path}")
    return {
        "files": [filename],
        "slope": report.slope,
        "slope_residual": report.slope_residual,
        "slope_interval": report.slope_interval,
        "pair_orders": report.pair_orders,
        "slope_window": run_config.slope_window,
        "diverged_replicates": report.diverged_replicates,
        "wall_clock": report.wall_clock,
        "details": report.details,
        "passed": report.passed,
    }


def run(
    subcommand: str,
    run_config: RunConfig,
    check: bool = False,
    show_progress: bool = False,
) -> int:
    """Execute a subcommand and write its artifacts.

    Args:
        subcommand (str): One of simulate, convergence, quadrature, consistency,
            poc, moments.
        run_config (RunConfig): Validated configuration.
        check (bool): Turn a failed pass condition into exit status 1.
        show_progress (bool): Show progress bars.

    Returns:
        int: 0 on success, 1 on a failed check.

    Raises:
        ConfigError: If the configuration lacks fields the subcommand needs.
        OSError: If the artifacts cannot be written.
    """
    violations = run_config.violations_for(subcommand)
    if violations:
        raise ConfigError(violations)
    out = run_config.out
    os.makedirs(out, exist_ok=True)

    if subcommand == "simulate":
        results = _simulate(run_config, out)
    else:
        results = _study(subcommand, run_config, out, show_progress)

    manifest = {
        "schema_version": config.SCHEMA_VERSION,
        "subcommand": subcommand,
        "config": run_config.model_dump(),
        "config_text": format_config(run_config),
        "results": results,
    }
    utils.write_json(os.path.join(out, config.MANIFEST_FILE), manifest)

    if check and not results["passed"]:
        failure = {
            "subcommand": subcommand,
            "reason": _failure_reason(results),
            "results": results,
        }
        utils.write_json(os.path.join(out, config.FAILURE_FILE), failure)
        logger.error(f"Check failed: {failure['reason']}")
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _failure_reason(results: Dict[str, Any]) -> str:
    if results.get("diverged_at") is not None:
        return f"run diverged at step {results['diverged_at']}"
    if results.get("diverged_replicates"):
        return f"{results['diverged_replicates']} replicate(s) diverged"
    if "monotone_decrease" in results.get("details", {}):
        return "mean W2 is not strictly decreasing in N"
    if "variation" in results.get("details", {}):
        return f"moment estimates vary by {results['details']['variation']:.3g} across step sizes"
    return f"slope {results.get('slope')} outside window {results.get('slope_window')}"


def main(argv: Optional[List[str]] = None) -> int:
    """Run the main function."""
    parser = setup_argparse()
    args = parser.parse_args(argv)

    if args.debug:
        logging.getLogger().setLevel(logging.DEBUG)

    overrides = {"seed": args.seed, "workers": args.workers, "out": args.out}
    try:
        run_config = load_config(args.config, overrides)
        return run(args.subcommand, run_config, args.check, settings.show_progress)
    except ConfigError as e:
        for violation in e.violations:
            logger.error(f"Configuration error: {violation}")
        return EXIT_CONFIG_ERROR
    except OSError as e:
        logger.error(f"I/O error: {str(e)}")
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
