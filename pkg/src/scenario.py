"""Scenario configuration loaded from flat JSON key/value files."""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from battery import BatterySpec, InvalidBatterySpecError
from constants import (
    CASE_WEIGHTS,
    CRITICAL_WINDOW,
    DEFAULT_HORIZON,
    DEFAULT_OUTPUT_DIR,
    DEFAULT_START_HOUR,
    DEFAULT_STEP_HOURS,
    PAIRING_MODES,
    PRESETS_DIR,
    REFERENCE_BATTERY,
)
from mixed_rv import QuadratureConfig
from montecarlo import McConfig, TolerancePolicy
from scheduler import CostWeights, SolverConfig

logger = logging.getLogger(__name__)

_NUMBER = (int, float)

# key -> accepted JSON types
SCENARIO_KEYS: dict[str, tuple[type, ...]] = {
    "forecast_file": (str,),
    "synthetic_profile": (str,),
    "synthetic_seed": (int,),
    "horizon": (int,),
    "start_hour": (int,),
    "step_hours": _NUMBER,
    "min_spread_kw": _NUMBER,
    "fit_workers": (int,),
    "case": (str,),
    "c1": _NUMBER,
    "c2": _NUMBER,
    "c3": (*_NUMBER, list),
    "c4": (*_NUMBER, list),
    "e_min": _NUMBER,
    "e_max": _NUMBER,
    "p_min": _NUMBER,
    "p_max": _NUMBER,
    "loss_coefficient": _NUMBER,
    "e0": _NUMBER,
    "solver_max_outer_iterations": (int,),
    "solver_max_inner_iterations": (int,),
    "solver_inner_tolerance": _NUMBER,
    "solver_constraint_tolerance": _NUMBER,
    "solver_penalty_growth": _NUMBER,
    "solver_gradient_mode": (str,),
    "solver_restarts": (int,),
    "seed": (int,),
    "quadrature_node_count": (int,),
    "quadrature_tail_cutoff": _NUMBER,
    "mc_samples": (int,),
    "mc_seed": (int,),
    "mc_antithetic": (bool,),
    "mc_batch_size": (int,),
    "mc_binomial_sigmas": _NUMBER,
    "mc_mean_sigmas": _NUMBER,
    "pairing": (str,),
    "output_dir": (str,),
    "critical_window": (list,),
}


class ScenarioConfigError(ValueError):
    """A scenario key is missing, unknown or has an invalid value."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ForecastSource:
    """Quantile CSV or synthetic profile, plus the clock convention."""

    forecast_file: Path | None = None
    synthetic_profile: str | None = None
    synthetic_seed: int = 1
    horizon: int = DEFAULT_HORIZON
    start_hour: int = DEFAULT_START_HOUR
    step_hours: float = DEFAULT_STEP_HOURS
    min_spread_kw: float | None = None
    fit_workers: int = 1


@dataclass(frozen=True)
class ScenarioConfig:
    """One fully resolved scenario."""

    source: ForecastSource
    battery: BatterySpec
    case: str | None
    weight_overrides: dict[str, Any]
    solver: SolverConfig
    quadrature: QuadratureConfig
    montecarlo: McConfig
    tolerance: TolerancePolicy
    pairing: str = "default"
    output_dir: Path = DEFAULT_OUTPUT_DIR
    critical_window: tuple[int, ...] = CRITICAL_WINDOW
    raw: dict[str, Any] = field(default_factory=dict, compare=False)

    def cost_weights(self, horizon: int) -> CostWeights:
        """
        Per-step cost weights: the named case, then explicit ``c1``..``c4``.

        Raises:
            ScenarioConfigError: If a per-step list has the wrong length
        """
        if self.case is not None:
            base = CostWeights.preset(self.case, horizon, self.critical_window)
            c1, c2, c3, c4 = base.c1, base.c2, base.c3, base.c4
        else:
            c1 = c2 = c3 = c4 = None
        o = self.weight_overrides
        c1, c2 = o.get("c1", c1), o.get("c2", c2)
        c3, c4 = o.get("c3", c3), o.get("c4", c4)
        for name, value in (("c3", c3), ("c4", c4)):
            if isinstance(value, list) and len(value) != horizon:
                raise ScenarioConfigError(name, f"needs {horizon} per-step values, got {len(value)}")
        try:
            return CostWeights(float(c1), float(c2), _broadcast(c3, horizon), _broadcast(c4, horizon))
        except ValueError as e:
            raise ScenarioConfigError("c1", str(e)) from e

    def to_mapping(self) -> dict[str, Any]:
        """Flat key/value view with defaults filled in."""
        s, b, sv, q, mc = self.source, self.battery, self.solver, self.quadrature, self.montecarlo
        mapping = {
            "forecast_file": str(s.forecast_file) if s.forecast_file else None,
            "synthetic_profile": s.synthetic_profile,
            "synthetic_seed": s.synthetic_seed,
            "horizon": s.horizon,
            "start_hour": s.start_hour,
            "step_hours": s.step_hours,
            "min_spread_kw": s.min_spread_kw,
            "fit_workers": s.fit_workers,
            "case": self.case,
            **self.weight_overrides,
            "e_min": b.e_min,
            "e_max": b.e_max,
            "p_min": b.p_min,
            "p_max": b.p_max,
            "loss_coefficient": b.loss_coefficient,
            "e0": b.e0,
            "solver_max_outer_iterations": sv.max_outer_iterations,
            "solver_max_inner_iterations": sv.max_inner_iterations,
            "solver_inner_tolerance": sv.inner_tolerance,
            "solver_constraint_tolerance": sv.constraint_tolerance,
            "solver_penalty_growth": sv.penalty_growth,
            "solver_gradient_mode": sv.gradient_mode,
            "solver_restarts": sv.restarts,
            "seed": sv.seed,
            "quadrature_node_count": q.node_count,
            "quadrature_tail_cutoff": q.tail_cutoff_prob,
            "mc_samples": mc.sample_count,
            "mc_seed": mc.seed,
            "mc_antithetic": mc.antithetic,
            "mc_batch_size": mc.batch_size,
            "mc_binomial_sigmas": self.tolerance.binomial_sigmas,
            "mc_mean_sigmas": self.tolerance.mean_sigmas,
            "pairing": self.pairing,
            "output_dir": str(self.output_dir),
            "critical_window": list(self.critical_window),
        }
        return {key: value for key, value in mapping.items() if value is not None}

    def config_hash(self) -> str:
        """SHA-256 of the canonical flat mapping (output directory excluded)."""
        mapping = {k: v for k, v in self.to_mapping().items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(mapping, sort_keys=True).encode()).hexdigest()


def _broadcast(value: Any, horizon: int) -> list[float]:
    if value is None:
        raise ScenarioConfigError("case", "either a case preset or all of c1..c4 are required")
    if hasattr(value, "__len__"):
        return [float(v) for v in value]
    return [float(value)] * horizon


def _check_types(data: dict[str, Any]) -> None:
    for key, value in data.items():
        if key not in SCENARIO_KEYS:
            raise ScenarioConfigError(key, "unknown key")
        accepted = SCENARIO_KEYS[key]
        # bool is an int subclass; only accept it where bool is listed
        if isinstance(value, bool) and bool not in accepted:
            raise ScenarioConfigError(key, f"expected {'/'.join(t.__name__ for t in accepted)}, got bool")
        if not isinstance(value, accepted):
            raise ScenarioConfigError(key, f"expected {'/'.join(t.__name__ for t in accepted)}, "
                                           f"got {type(value).__name__}")


def scenario_from_mapping(data: dict[str, Any]) -> ScenarioConfig:
    """
    Validate a flat mapping and build the scenario.

    Raises:
        ScenarioConfigError: Naming the offending key
    """
    _check_types(data)
    has_file = "forecast_file" in data
    has_profile = "synthetic_profile" in data
    if has_file == has_profile:
        raise ScenarioConfigError("forecast_file", "exactly one of forecast_file and synthetic_profile is required")

    case = data.get("case")
    if case is not None and case not in CASE_WEIGHTS:
        raise ScenarioConfigError("case", f"unknown case {case!r}, expected one of {', '.join(CASE_WEIGHTS)}")
    overrides = {k: data[k] for k in ("c1", "c2", "c3", "c4") if k in data}
    if case is None and len(overrides) < 4:
        raise ScenarioConfigError("case", "either a case preset or all of c1..c4 are required")

    pairing = data.get("pairing", "default")
    if pairing not in PAIRING_MODES:
        raise ScenarioConfigError("pairing", f"expected one of {', '.join(PAIRING_MODES)}, got {pairing!r}")

    source = ForecastSource(
        forecast_file=Path(data["forecast_file"]) if has_file else None,
        synthetic_profile=data.get("synthetic_profile"),
        synthetic_seed=data.get("synthetic_seed", 1),
        horizon=data.get("horizon", DEFAULT_HORIZON),
        start_hour=data.get("start_hour", DEFAULT_START_HOUR),
        step_hours=float(data.get("step_hours", DEFAULT_STEP_HOURS)),
        min_spread_kw=data.get("min_spread_kw"),
        fit_workers=data.get("fit_workers", 1),
    )
    if source.horizon < 1:
        raise ScenarioConfigError("horizon", "must be at least 1")
    if source.min_spread_kw is not None and source.min_spread_kw <= 0:
        raise ScenarioConfigError("min_spread_kw", "must be positive")

    seed = data.get("seed", 0)
    battery_values = {k: float(data.get(k, v)) for k, v in REFERENCE_BATTERY.items()}
    builders = {
        "e_min": lambda: BatterySpec(**battery_values, e0=data.get("e0"), step_hours=source.step_hours),
        "solver_max_outer_iterations": lambda: SolverConfig(
            max_outer_iterations=data.get("solver_max_outer_iterations", 50),
            max_inner_iterations=data.get("solver_max_inner_iterations", 1000),
            inner_tolerance=data.get("solver_inner_tolerance", 1e-5),
            constraint_tolerance=data.get("solver_constraint_tolerance", 1e-6),
            penalty_growth=data.get("solver_penalty_growth", 10.0),
            gradient_mode=data.get("solver_gradient_mode", "analytic"),
            restarts=data.get("solver_restarts", 0),
            seed=seed,
        ),
        "quadrature_node_count": lambda: QuadratureConfig(
            node_count=data.get("quadrature_node_count", QuadratureConfig.node_count),
            tail_cutoff_prob=data.get("quadrature_tail_cutoff", QuadratureConfig.tail_cutoff_prob),
        ),
        "mc_samples": lambda: McConfig(
            sample_count=data.get("mc_samples", McConfig.sample_count),
            seed=data.get("mc_seed", seed),
            antithetic=data.get("mc_antithetic", False),
            batch_size=data.get("mc_batch_size", McConfig.batch_size),
        ),
        "mc_binomial_sigmas": lambda: TolerancePolicy(
            binomial_sigmas=data.get("mc_binomial_sigmas", TolerancePolicy.binomial_sigmas),
            mean_sigmas=data.get("mc_mean_sigmas", TolerancePolicy.mean_sigmas),
        ),
    }
    built = {}
    for key, build in builders.items():
        try:
            built[key] = build()
        except (ValueError, InvalidBatterySpecError) as e:
            raise ScenarioConfigError(key, str(e)) from e

    window = tuple(data.get("critical_window", CRITICAL_WINDOW))
    if not all(isinstance(k, int) and not isinstance(k, bool) for k in window):
        raise ScenarioConfigError("critical_window", "expected a list of step indices")

    return ScenarioConfig(
        source=source,
        battery=built["e_min"],
        case=case,
        weight_overrides=overrides,
        solver=built["solver_max_outer_iterations"],
        quadrature=built["quadrature_node_count"],
        montecarlo=built["mc_samples"],
        tolerance=built["mc_binomial_sigmas"],
        pairing=pairing,
        output_dir=Path(data.get("output_dir", DEFAULT_OUTPUT_DIR)),
        critical_window=window,
        raw=dict(data),
    )


def resolve_config_path(source: str | Path) -> Path:
    """A scenario file path, or the name of a shipped preset (``case1``..``case3``)."""
    path = Path(source)
    if path.exists():
        return path
    preset = PRESETS_DIR / f"{source}.json"
    if preset.exists():
        return preset
    raise ScenarioConfigError("config", f"no scenario file or preset named {str(source)!r}")


def load_scenario(source: str | Path, overrides: dict[str, Any] | None = None) -> ScenarioConfig:
    """
    Load a scenario file and apply command-line overrides.

    Args:
        source: Scenario JSON path or preset name
        overrides: Flat keys that replace file values (None values are ignored)

    Raises:
        ScenarioConfigError: On unreadable files or invalid keys
    """
    path = resolve_config_path(source)
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ScenarioConfigError("config", f"cannot parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise ScenarioConfigError("config", f"{path} must hold a JSON object")

    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if "forecast_file" in data:
        forecast = Path(data["forecast_file"])
        if not forecast.is_absolute():
            data["forecast_file"] = str(path.parent / forecast)
    logger.info("Loaded scenario %s", path)
    return scenario_from_mapping(data)
