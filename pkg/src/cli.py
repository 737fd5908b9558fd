"""CLI commands for the probabilistic battery dispatch pipeline."""

import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterator, Sequence

import click
import numpy as np
import pandas as pd

from constants import CRITICAL_WINDOW, DEFAULT_HORIZON, DEFAULT_START_HOUR, DEFAULT_STEP_HOURS, LOG_DATE_FORMAT, \
    LOG_FILE_NAME, LOG_FORMAT, PAIRING_MODES
from forecast_model import (
    FitResult,
    ProsumptionModel,
    center,
    fit_forecast,
    hour_labels,
    load_fitted_model,
    parse_quantile_file,
    smooth_quantiles,
    synth_forecast,
    write_fitted_model,
    write_quantile_file,
)
from montecarlo import ComparisonReport, compare, run_oracle, write_comparison_json
from scenario import ScenarioConfig, ScenarioConfigError, load_scenario
from scheduler import (
    ScheduleSolution,
    SchedulingProblem,
    build_problem,
    load_decision_vector,
    read_solution_steps,
    solve,
    write_plot_csv,
    write_solution_json,
)

logger = logging.getLogger(__name__)

FITTED_MODEL_FILE = "fitted_model.json"
SOLUTION_FILE = "solution.json"
PLOT_FILE = "plot_data.csv"
COMPARISON_FILE = "mc_comparison.json"
SUMMARY_FILE = "summary.txt"


class RunComparisonError(ValueError):
    """Run directories cannot be compared."""


@dataclass
class RunArtifacts:
    """Outputs of one pipeline run."""

    output_dir: Path
    solution: ScheduleSolution
    report: ComparisonReport
    wall_time_s: float
    paths: dict[str, Path] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.solution.converged and self.report.passed


def configure_logging(verbose: bool = False) -> None:
    """Timestamped records on stderr; repeated calls replace the handler."""
    root = logging.getLogger()
    for handler in [h for h in root.handlers if getattr(h, "_dispatch_stderr", False)]:
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=LOG_DATE_FORMAT))
    handler._dispatch_stderr = True
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


@contextmanager
def run_log(output_dir: Path) -> Iterator[None]:
    """Mirror log records into ``run.log`` inside the output directory."""
    output_dir.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger()
    handler = logging.FileHandler(output_dir / LOG_FILE_NAME, mode="w")
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=LOG_DATE_FORMAT))
    previous_level = root.level
    root.addHandler(handler)
    if root.level == logging.NOTSET or root.level > logging.INFO:
        root.setLevel(logging.INFO)
    try:
        yield
    finally:
        root.removeHandler(handler)
        root.setLevel(previous_level)
        handler.close()


def fit_scenario_forecast(config: ScenarioConfig) -> list[FitResult]:
    """Read or synthesize the scenario's quantile forecast, smooth it and fit every step."""
    src = config.source
    if src.forecast_file is not None:
        forecast = parse_quantile_file(src.forecast_file, step_hours=src.step_hours, start_hour=src.start_hour)
    else:
        forecast = synth_forecast(src.synthetic_seed, src.synthetic_profile, horizon=src.horizon,
                                  start_hour=src.start_hour, step_hours=src.step_hours)
    return fit_forecast(smooth_quantiles(forecast), min_spread_kw=src.min_spread_kw, workers=src.fit_workers)


def scenario_model(config: ScenarioConfig, fitted: Path | None = None) -> tuple[list[FitResult], ProsumptionModel]:
    """Fits (from ``fitted`` when given) and the centered prosumption model."""
    fits = load_fitted_model(fitted) if fitted is not None else fit_scenario_forecast(config)
    model = center([f.cdf for f in fits], step_hours=config.source.step_hours, start_hour=config.source.start_hour)
    return fits, model


def scenario_problem(config: ScenarioConfig, model: ProsumptionModel) -> SchedulingProblem:
    return build_problem(model, config.battery, config.cost_weights(model.horizon), config.quadrature,
                         config.pairing)


def run_metadata(config: ScenarioConfig, wall_time_s: float) -> dict:
    return {
        "config_hash": config.config_hash(),
        "case": config.case,
        "pairing": config.pairing,
        "seed": config.solver.seed,
        "mc_seed": config.montecarlo.seed,
        "start_hour": config.source.start_hour,
        "step_hours": config.source.step_hours,
        "wall_time_s": wall_time_s,
    }


def format_summary(config: ScenarioConfig, sol: ScheduleSolution, report: ComparisonReport,
                   wall_time_s: float) -> str:
    """Human-readable run summary."""
    labels = hour_labels(sol.horizon, config.source.start_hour, config.source.step_hours)
    window = [k for k in config.critical_window if 0 <= k < sol.horizon]
    summary = report.summary()
    lines = [
        f"Scenario case: {config.case or 'explicit weights'} (pairing: {config.pairing})",
        f"Config hash: {config.config_hash()}",
        f"Solver: {'converged' if sol.converged else 'NOT converged'} after {sol.iterations} outer iterations"
        f" ({sol.message})",
        f"Objective: {sol.objective:.6f}",
        f"Wall time: {wall_time_s:.2f} s",
    ]
    if sol.kkt is not None:
        lines.append(f"KKT: stationarity {sol.kkt.stationarity:.3g}, max violation {sol.kkt.max_violation:.3g}, "
                     f"complementarity {sol.kkt.max_complementarity:.3g}")
    lines.append(f"Zero-atom mass: max {sol.zero_atom_mass.max():.4f}, steps with mass >= 0.05: "
                 f"{int((sol.zero_atom_mass >= 0.05).sum())}")
    if window:
        lines.append(f"Critical window {labels[window[0]]}-{labels[window[-1]]}: "
                     f"mean P(down) {sol.p1[window].mean():.4f}, mean P(up) {sol.p2[window].mean():.4f}")
    lines.append(f"Monte-Carlo: {summary['sample_count']} samples, {summary['checks'] - summary['failed']}/"
                 f"{summary['checks']} checks passed")
    if summary["failed"]:
        lines.append(f"Failed quantities: {', '.join(summary['failed_quantities'])}")
    lines.append(f"Loss-approximation excess: {summary['loss_approximation_excess_kwh']:.3g} kWh")
    lines.append("")
    lines.append(f"{'hour':>5} {'p_L':>8} {'p_B':>8} {'p_G':>8} {'x_lo':>8} {'x_up':>8} {'E':>8} "
                 f"{'P(down)':>8} {'P(up)':>8}")
    for k in range(sol.horizon):
        lines.append(f"{labels[k]:>5} {sol.expected_prosumption[k]:8.3f} {sol.decision.p_battery[k]:8.3f} "
                     f"{sol.p_grid[k]:8.3f} {sol.decision.x_lower[k]:8.3f} {sol.decision.x_upper[k]:8.3f} "
                     f"{sol.trajectory.energy[k + 1]:8.3f} {sol.p1[k]:8.4f} {sol.p2[k]:8.4f}")
    return "\n".join(lines) + "\n"


def run_scenario(config: ScenarioConfig) -> RunArtifacts:
    """
    Run forecast -> fit -> solve -> validate and write every artifact.

    Artifacts are written even when the solver does not converge or oracle
    checks fail; :attr:`RunArtifacts.passed` reports both.

    Raises:
        ScenarioConfigError: If per-step weights do not match the horizon
    """
    out = config.output_dir
    paths = {
        "fitted_model": out / FITTED_MODEL_FILE,
        "solution": out / SOLUTION_FILE,
        "plot_data": out / PLOT_FILE,
        "mc_comparison": out / COMPARISON_FILE,
        "summary": out / SUMMARY_FILE,
        "log": out / LOG_FILE_NAME,
    }
    with run_log(out):
        started = time.perf_counter()
        fits, model = scenario_model(config)
        write_fitted_model(paths["fitted_model"], fits)

        problem = scenario_problem(config, model)
        sol = solve(problem, config.solver)
        wall_time_s = time.perf_counter() - started
        labels = hour_labels(model.horizon, model.start_hour, model.step_hours)
        write_solution_json(paths["solution"], sol, run_metadata(config, wall_time_s), labels)
        write_plot_csv(paths["plot_data"], sol)

        stats = run_oracle(model, sol, config.battery, config.montecarlo)
        report = compare(sol, stats, config.tolerance)
        write_comparison_json(paths["mc_comparison"], report)
        paths["summary"].write_text(format_summary(config, sol, report, wall_time_s))
        logger.info("Artifacts written to %s", out)
    return RunArtifacts(out, sol, report, wall_time_s, paths)


def _read_run(run_dir: Path) -> tuple[pd.DataFrame, dict]:
    path = run_dir / SOLUTION_FILE
    if not path.exists():
        raise RunComparisonError(f"{run_dir} holds no {SOLUTION_FILE}")
    with open(path, "r") as f:
        metadata = json.load(f)["metadata"]
    return read_solution_steps(path), metadata


def compare_cases(run_dirs: Sequence[Path], window: Sequence[int] = CRITICAL_WINDOW) -> dict:
    """
    Tabulate nominal grid powers, zero-atom masses and window deviation
    probabilities across runs.

    Returns:
        Report with ``per_run`` rows, ``pairwise`` grid-power differences and
        per-step ``p_g_difference`` of every run against the first

    Raises:
        RunComparisonError: If fewer than one run is given, horizons differ
            or the window falls outside the horizon
    """
    if not run_dirs:
        raise RunComparisonError("at least one run directory is required")
    runs = [(Path(d), *_read_run(Path(d))) for d in run_dirs]
    horizons = {len(steps) for _, steps, _ in runs}
    if len(horizons) != 1:
        raise RunComparisonError(f"runs cover different horizons: {sorted(horizons)}")
    horizon = horizons.pop()
    window = list(window)
    if not window or not all(0 <= k < horizon for k in window):
        raise RunComparisonError(f"window {window} falls outside the {horizon}-step horizon")

    per_run = []
    for run_dir, steps, metadata in runs:
        per_run.append({
            "run": str(run_dir),
            "case": metadata.get("case"),
            "objective": metadata.get("objective"),
            "total_zero_atom_mass": float(steps["zero_atom_mass"].sum()),
            "max_zero_atom_mass": float(steps["zero_atom_mass"].max()),
            "window_prob_down": float(steps["p1"].iloc[window].mean()),
            "window_prob_up": float(steps["p2"].iloc[window].mean()),
        })

    pairwise = []
    for (dir_a, steps_a, _), (dir_b, steps_b, _) in combinations(runs, 2):
        diff = np.abs(steps_a["p_g"].to_numpy(float) - steps_b["p_g"].to_numpy(float))
        pairwise.append({
            "a": str(dir_a),
            "b": str(dir_b),
            "max_abs_p_g_difference": float(diff.max()),
            "step_of_max": int(diff.argmax()),
        })

    reference = runs[0][1]["p_g"].to_numpy(float)
    return {
        "horizon": horizon,
        "window": window,
        "per_run": per_run,
        "pairwise": pairwise,
        "p_g_difference": {str(d): (steps["p_g"].to_numpy(float) - reference).tolist() for d, steps, _ in runs},
    }


@contextmanager
def _reported_errors() -> Iterator[None]:
    """Config errors become usage errors (exit 2); domain errors exit 1."""
    try:
        yield
    except ScenarioConfigError as e:
        raise click.UsageError(str(e)) from e
    except (ValueError, OSError) as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)


def _scenario_overrides(seed: int | None, samples: int | None, case: str | None, pairing: str | None,
                        output_dir: Path | None) -> dict:
    return {
        "seed": seed,
        "mc_samples": samples,
        "case": case,
        "pairing": pairing,
        "output_dir": str(output_dir) if output_dir is not None else None,
    }


def scenario_options(command):
    """Shared ``--config`` and override flags."""
    options = [
        click.option("--config", "config_source", required=True,
                     help="Scenario JSON file or preset name (case1, case2, case3)"),
        click.option("--seed", type=int, help="Override the solver/Monte-Carlo seed"),
        click.option("--samples", type=int, help="Override the Monte-Carlo sample count"),
        click.option("--case", type=click.Choice(["case1", "case2", "case3"]), help="Override the weight preset"),
        click.option("--pairing", type=click.Choice(PAIRING_MODES), help="Override how deviation probabilities pair with expectations in the cost"),
        click.option("--output-dir", type=click.Path(path_type=Path), help="Override the output directory"),
    ]
    for option in reversed(options):
        command = option(command)
    return command


@click.group()
@click.version_option(version="0.1.0")
@click.option("--verbose", "-v", is_flag=True, help="Log solver iterations and other debug detail")
def cli(verbose: bool) -> None:
    """Probabilistic battery dispatch - schedule a home battery against quantile forecasts."""
    configure_logging(verbose)


@cli.command(name="synth")
@click.argument("profile", type=click.Choice(["pv_dominant", "flat", "asymmetric_morning"]))
@click.option("--seed", type=int, default=1, show_default=True, help="Profile seed")
@click.option("--horizon", type=int, default=DEFAULT_HORIZON, show_default=True, help="Number of steps")
@click.option("--start-hour", type=int, default=DEFAULT_START_HOUR, show_default=True, help="Clock hour of step 0")
@click.option("--step-hours", type=float, default=DEFAULT_STEP_HOURS, show_default=True, help="Step duration")
@click.option("--output", "-o", type=click.Path(path_type=Path), required=True, help="Quantile CSV to write")
def synth(profile: str, seed: int, horizon: int, start_hour: int, step_hours: float, output: Path) -> None:
    """Write a synthetic quantile forecast CSV."""
    with _reported_errors():
        forecast = synth_forecast(seed, profile, horizon=horizon, start_hour=start_hour, step_hours=step_hours)
        write_quantile_file(forecast, output)
    click.echo(f"Wrote {horizon}-step {profile} forecast to {output}")


@cli.command(name="fit")
@click.argument("forecast_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--output", "-o", type=click.Path(path_type=Path), required=True, help="Fitted-model JSON to write")
@click.option("--min-spread", type=float, help="Minimum logistic scale in kW (caps the inverse scales)")
@click.option("--workers", type=int, default=1, show_default=True, help="Parallel fitting threads")
@click.option("--no-smooth", is_flag=True, help="Fit the raw quantiles without smoothing")
def fit(forecast_file: Path, output: Path, min_spread: float | None, workers: int, no_smooth: bool) -> None:
    """Fit a double-logistic CDF to every step of a quantile CSV."""
    with _reported_errors():
        forecast = parse_quantile_file(forecast_file)
        if not no_smooth:
            forecast = smooth_quantiles(forecast)
        fits = fit_forecast(forecast, min_spread_kw=min_spread, workers=workers)
        write_fitted_model(output, fits)

    click.echo(f"Fitted {len(fits)} steps, worst rms {max(f.fit_rms for f in fits):.4g}")
    degraded = [k for k, f in enumerate(fits) if f.degraded]
    if degraded:
        click.echo(f"Warning: degraded fits at steps {degraded}", err=True)


@cli.command(name="solve")
@scenario_options
@click.option("--fitted", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Start from a fitted-model JSON instead of the scenario forecast")
def solve_command(config_source: str, seed: int | None, samples: int | None, case: str | None,
                  pairing: str | None, output_dir: Path | None, fitted: Path | None) -> None:
    """Solve the scheduling problem and write the solution JSON and plot data."""
    with _reported_errors():
        config = load_scenario(config_source, _scenario_overrides(seed, samples, case, pairing, output_dir))
        with run_log(config.output_dir):
            started = time.perf_counter()
            _, model = scenario_model(config, fitted)
            sol = solve(scenario_problem(config, model), config.solver)
            labels = hour_labels(model.horizon, model.start_hour, model.step_hours)
            write_solution_json(config.output_dir / SOLUTION_FILE, sol,
                                run_metadata(config, time.perf_counter() - started), labels)
            write_plot_csv(config.output_dir / PLOT_FILE, sol)

    click.echo(f"Objective {sol.objective:.6f}; solution written to {config.output_dir / SOLUTION_FILE}")
    if not sol.converged:
        click.echo(f"Error: solver did not converge ({sol.message})", err=True)
        sys.exit(1)


@cli.command(name="validate")
@scenario_options
@click.option("--solution", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Solution JSON to validate (default: <output-dir>/solution.json)")
@click.option("--fitted", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Fitted-model JSON the solution was computed from")
def validate(config_source: str, seed: int | None, samples: int | None, case: str | None, pairing: str | None,
             output_dir: Path | None, solution: Path | None, fitted: Path | None) -> None:
    """Check a solution against Monte-Carlo rollouts."""
    with _reported_errors():
        config = load_scenario(config_source, _scenario_overrides(seed, samples, case, pairing, output_dir))
        solution = solution or config.output_dir / SOLUTION_FILE
        with run_log(config.output_dir):
            _, model = scenario_model(config, fitted)
            sol = scenario_problem(config, model).assemble(load_decision_vector(solution))
            stats = run_oracle(model, sol, config.battery, config.montecarlo)
            report = compare(sol, stats, config.tolerance)
            write_comparison_json(config.output_dir / COMPARISON_FILE, report)

    summary = report.summary()
    click.echo(f"{summary['checks'] - summary['failed']}/{summary['checks']} checks passed "
               f"({summary['sample_count']} samples)")
    if not report.passed:
        click.echo(f"Error: failed checks: {', '.join(summary['failed_quantities'])}", err=True)
        sys.exit(1)


@cli.command(name="run")
@scenario_options
def run(config_source: str, seed: int | None, samples: int | None, case: str | None, pairing: str | None,
        output_dir: Path | None) -> None:
    """Run the full forecast -> fit -> solve -> validate pipeline."""
    with _reported_errors():
        config = load_scenario(config_source, _scenario_overrides(seed, samples, case, pairing, output_dir))
        artifacts = run_scenario(config)

    click.echo(artifacts.paths["summary"].read_text())
    if not artifacts.solution.converged:
        click.echo(f"Error: solver did not converge ({artifacts.solution.message})", err=True)
    if not artifacts.report.passed:
        failed = ", ".join(artifacts.report.summary()["failed_quantities"])
        click.echo(f"Error: Monte-Carlo checks failed: {failed}", err=True)
    if not artifacts.passed:
        sys.exit(1)


def _parse_window(ctx: click.Context, param: click.Parameter, value: str) -> list[int]:
    try:
        return [int(k) for k in value.split(",") if k.strip()]
    except ValueError:
        raise click.BadParameter("expected comma-separated step indices, e.g. 6,7")


@cli.command(name="compare")
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--window", default=",".join(str(k) for k in CRITICAL_WINDOW), show_default=True,
              callback=_parse_window, help="Critical-window step indices")
@click.option("--output", "-o", type=click.Path(path_type=Path), help="Write the report as JSON")
def compare_command(run_dirs: tuple[Path, ...], window: list[int], output: Path | None) -> None:
    """Compare nominal grid powers and deviation probabilities across runs."""
    with _reported_errors():
        report = compare_cases(run_dirs, window)

    click.echo(pd.DataFrame(report["per_run"]).to_string(index=False))
    click.echo()
    for pair in report["pairwise"]:
        click.echo(f"max |p_G difference| {pair['a']} vs {pair['b']}: {pair['max_abs_p_g_difference']:.6f} kW "
                   f"(step {pair['step_of_max']})")
    if output is not None:
        output.parent.mkdir(parents=True, exist_ok=True)
        with open(output, "w") as f:
            json.dump(report, f, indent=2)
        click.echo(f"Report written to {output}")


@cli.command(name="show-config")
@click.option("--config", "config_source", required=True, help="Scenario JSON file or preset name")
def show_config(config_source: str) -> None:
    """Show a scenario with every default filled in."""
    try:
        config = load_scenario(config_source)
    except ScenarioConfigError as e:
        raise click.UsageError(str(e)) from e

    click.echo(f"Scenario: {config_source}")
    click.echo(f"Config hash: {config.config_hash()}\n")
    click.echo(json.dumps(config.to_mapping(), indent=2))
