"""Quantile forecast ingestion, smoothing and double-logistic fitting."""

import json
import logging
import re
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import least_squares
from scipy.special import expit, logit

from constants import (
    DEFAULT_HORIZON,
    DEFAULT_START_HOUR,
    DEFAULT_STEP_HOURS,
    FIT_MAX_EVALUATIONS,
    MAX_INVERSE_SCALE,
    MIN_INVERSE_SCALE,
    QUANTILE_LEVELS,
)
from mixed_rv import DoubleLogisticCdf, cdf_eval, quantile

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["step", "level", "value_kw"]
_SMOOTHING_HALF_WIDTH = 2
_MASS_LOGIT_LIMIT = 30.0
_FIT_TOLERANCE = 0.02


class QuantileParseError(ValueError):
    """A quantile CSV row could not be parsed."""

    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class QuantileValidationError(ValueError):
    """Parsed quantiles violate the forecast invariants."""


class DegenerateQuantileCurveError(ValueError):
    """All quantile values coincide, so no scale can be fitted."""


class UnknownProfileError(ValueError):
    """Unknown synthetic profile name."""


@dataclass(frozen=True)
class QuantileStep:
    """Quantile curve of one time step."""

    levels: NDArray[np.float64]
    values: NDArray[np.float64]


@dataclass(frozen=True)
class QuantileForecast:
    """Per-step quantile curves of prosumption (kW)."""

    steps: tuple[QuantileStep, ...]
    step_hours: float = DEFAULT_STEP_HOURS
    start_hour: int = DEFAULT_START_HOUR

    def __post_init__(self) -> None:
        if not self.steps:
            raise QuantileValidationError("a forecast needs at least one step")
        for k, step in enumerate(self.steps):
            if step.levels.shape != step.values.shape:
                raise QuantileValidationError(f"step {k}: levels and values differ in length")
            if np.any((step.levels <= 0) | (step.levels >= 1)):
                raise QuantileValidationError(f"step {k}: levels must lie in (0, 1)")
            if np.any(np.diff(step.levels) <= 0):
                raise QuantileValidationError(f"step {k}: levels must be strictly increasing")

    @property
    def horizon_steps(self) -> int:
        return len(self.steps)

    def hour_label(self, k: int) -> str:
        """Clock label of step ``k`` (e.g. ``"06:00"``)."""
        return hour_labels(k + 1, self.start_hour, self.step_hours)[k]


@dataclass(frozen=True)
class FitResult:
    """Fitted CDF of one step with its goodness of fit."""

    cdf: DoubleLogisticCdf
    fit_rms: float
    max_abs_residual: float
    degraded: bool = False


@dataclass(frozen=True)
class ProsumptionModel:
    """Expected prosumption plus zero-mean deviation distributions per step."""

    expected: NDArray[np.float64]
    centered: DoubleLogisticCdf
    fitted: DoubleLogisticCdf
    step_hours: float = DEFAULT_STEP_HOURS
    start_hour: int = DEFAULT_START_HOUR

    @property
    def horizon(self) -> int:
        return int(self.expected.size)

    def step_cdf(self, k: int) -> DoubleLogisticCdf:
        return self.centered.step(k)


def hour_labels(horizon: int, start_hour: float = DEFAULT_START_HOUR,
                step_hours: float = DEFAULT_STEP_HOURS) -> list[str]:
    """``HH:MM`` clock labels of steps 0..horizon-1, wrapping at midnight."""
    labels = []
    for k in range(horizon):
        minutes = int(round((start_hour + k * step_hours) * 60)) % (24 * 60)
        labels.append(f"{minutes // 60:02d}:{minutes % 60:02d}")
    return labels


def _parse_error_line(message: str) -> int:
    match = re.search(r"line (\d+)", message)
    return int(match.group(1)) if match else 0


def _as_float(text: str) -> float:
    # float() rounds correctly, so %.17g text reads back bit-exact
    try:
        return float(text)
    except ValueError:
        return np.nan


def parse_quantile_file(path: Path, step_hours: float = DEFAULT_STEP_HOURS,
                        start_hour: int = DEFAULT_START_HOUR) -> QuantileForecast:
    """
    Parse a quantile forecast CSV (``step,level,value_kw``, steps 0-indexed).

    Args:
        path: CSV file
        step_hours: Step duration in hours
        start_hour: Clock hour of step 0

    Returns:
        QuantileForecast with steps sorted by index and levels sorted per step

    Raises:
        QuantileParseError: If the header or a row is malformed (names the line)
        QuantileValidationError: On out-of-range or duplicate levels, or gaps in steps
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.ParserError as e:
        raise QuantileParseError(_parse_error_line(str(e)), f"malformed row ({e})") from e
    except pd.errors.EmptyDataError as e:
        raise QuantileParseError(1, "file is empty") from e

    if [c.strip() for c in frame.columns] != CSV_COLUMNS:
        raise QuantileParseError(1, f"expected header {','.join(CSV_COLUMNS)}, got {','.join(frame.columns)}")
    if frame.empty:
        raise QuantileValidationError("forecast file has no rows")

    numeric = frame.apply(lambda col: col.str.strip().map(_as_float))
    bad = ~np.isfinite(numeric).all(axis=1) | (numeric["step"] != np.round(numeric["step"]))
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise QuantileParseError(row + 2, f"cannot parse row {','.join(frame.iloc[row])!r}")

    numeric["line"] = np.arange(len(numeric)) + 2
    out_of_range = (numeric["level"] <= 0) | (numeric["level"] >= 1)
    if out_of_range.any():
        first = numeric[out_of_range].iloc[0]
        raise QuantileValidationError(f"line {int(first['line'])}: level {first['level']} outside (0, 1)")

    numeric["step"] = numeric["step"].astype(int)
    duplicated = numeric.duplicated(subset=["step", "level"])
    if duplicated.any():
        first = numeric[duplicated].iloc[0]
        raise QuantileValidationError(
            f"line {int(first['line'])}: duplicate level {first['level']} in step {int(first['step'])}"
        )

    numeric = numeric.sort_values(["step", "level"], kind="stable")
    indices = numeric["step"].unique()
    if not np.array_equal(indices, np.arange(indices.size)):
        raise QuantileValidationError(f"steps must be contiguous from 0, got {indices.tolist()}")

    steps = tuple(
        QuantileStep(group["level"].to_numpy(dtype=float), group["value_kw"].to_numpy(dtype=float))
        for _, group in numeric.groupby("step", sort=True)
    )
    logger.info("Parsed %d steps from %s", len(steps), path)
    return QuantileForecast(steps, step_hours=step_hours, start_hour=start_hour)


def write_quantile_file(forecast: QuantileForecast, path: Path) -> None:
    """Write a forecast in the CSV layout read by :func:`parse_quantile_file`."""
    rows = [
        (k, level, value)
        for k, step in enumerate(forecast.steps)
        for level, value in zip(step.levels, step.values)
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=CSV_COLUMNS).to_csv(path, index=False, float_format="%.17g")


def _smooth_curve(values: NDArray[np.float64]) -> NDArray[np.float64]:
    ordered = np.sort(values)
    n = ordered.size
    smoothed = np.empty_like(ordered)
    for i in range(n):
        h = min(_SMOOTHING_HALF_WIDTH, i, n - 1 - i)
        smoothed[i] = ordered[i - h:i + h + 1].mean()
    return np.maximum.accumulate(smoothed)


def smooth_quantiles(raw: QuantileForecast) -> QuantileForecast:
    """
    Remove quantile crossings and smooth each step's quantile curve.

    Values are sorted (monotone rearrangement), then averaged over a centered
    5-point window that shrinks symmetrically at both ends.
    """
    steps = tuple(QuantileStep(step.levels.copy(), _smooth_curve(step.values)) for step in raw.steps)
    return QuantileForecast(steps, step_hours=raw.step_hours, start_hour=raw.start_hour)


def _unpack(theta: NDArray[np.float64]) -> tuple[float, float, float, float, float]:
    return expit(theta[0]), np.exp(theta[1]), theta[2], np.exp(theta[3]), theta[4]


def _residuals(theta: NDArray[np.float64], y: NDArray[np.float64], levels: NDArray[np.float64]) -> NDArray[np.float64]:
    w1, a, m1, b, m2 = _unpack(theta)
    return w1 * expit(a * (y - m1)) + (1.0 - w1) * expit(b * (y - m2)) - levels


def _jacobian(theta: NDArray[np.float64], y: NDArray[np.float64], levels: NDArray[np.float64]) -> NDArray[np.float64]:
    w1, a, m1, b, m2 = _unpack(theta)
    s1 = expit(a * (y - m1))
    s2 = expit(b * (y - m2))
    d1 = s1 * (1.0 - s1)
    d2 = s2 * (1.0 - s2)
    return np.column_stack([
        w1 * (1.0 - w1) * (s1 - s2),
        w1 * d1 * a * (y - m1),
        -w1 * d1 * a,
        (1.0 - w1) * d2 * b * (y - m2),
        -(1.0 - w1) * d2 * b,
    ])


def _initial_guesses(levels: NDArray[np.float64], y: NDArray[np.float64]) -> list[tuple[float, ...]]:
    """Three deterministic starts from the median/IQR split of the curve."""
    at = lambda p: float(np.interp(p, levels, y))  # noqa: E731
    width = 2.0 * np.log(3.0)  # inverse scale of a logistic with unit IQR
    return [
        (0.5, 2.0 * width, at(0.25), 2.0 * width, at(0.75)),
        (0.8, width, at(0.5), width, at(0.9)),
        (0.2, width, at(0.1), width, at(0.5)),
    ]


def fit_double_logistic(levels: ArrayLike, values: ArrayLike, min_spread_kw: float | None = None) -> FitResult:
    """
    Fit a double-logistic CDF to one quantile curve by bounded least squares.

    Residuals are ``F(value_i) - level_i``. The masses are parametrized
    through a logit and the inverse scales through a log, so ``w1 + w4 = 1``
    and positivity hold by construction; inverse scales are clamped to
    ``[1e-3, 50]`` 1/kW, or tighter when ``min_spread_kw`` is given. Three
    deterministic starts are tried and the best one is kept.

    Args:
        levels: Probability levels (at least 6, increasing)
        values: Quantile values in kW (non-decreasing)
        min_spread_kw: Optional lower bound on each component's scale

    Returns:
        FitResult, ``degraded`` when the optimizer hit its evaluation cap

    Raises:
        ValueError: If fewer than 6 pairs are given
        DegenerateQuantileCurveError: If all values are equal
    """
    levels = np.asarray(levels, dtype=float)
    values = np.asarray(values, dtype=float)
    if levels.size < 6 or levels.shape != values.shape:
        raise ValueError(f"need at least 6 (level, value) pairs of equal length, got {levels.size}")
    if np.ptp(values) <= 1e-12 * max(1.0, float(np.max(np.abs(values)))):
        raise DegenerateQuantileCurveError("degenerate quantile curve")

    center = float(np.interp(0.5, levels, values))
    scale = float(np.interp(0.75, levels, values) - np.interp(0.25, levels, values))
    if scale <= 0:
        scale = float(np.ptp(values)) / 4.0
    y = (values - center) / scale

    max_inverse = MAX_INVERSE_SCALE if min_spread_kw is None else min(MAX_INVERSE_SCALE, 1.0 / min_spread_kw)
    log_lo = np.log(MIN_INVERSE_SCALE * scale)
    log_hi = np.log(max_inverse * scale)
    lower = np.array([-_MASS_LOGIT_LIMIT, log_lo, -np.inf, log_lo, -np.inf])
    upper = np.array([_MASS_LOGIT_LIMIT, log_hi, np.inf, log_hi, np.inf])

    best = None
    for w1, a, m1, b, m2 in _initial_guesses(levels, y):
        theta0 = np.array([logit(w1), np.log(a), m1, np.log(b), m2])
        theta0 = np.clip(theta0, lower + 1e-9, upper - 1e-9)
        result = least_squares(
            _residuals, theta0, jac=_jacobian, bounds=(lower, upper), method="trf", x_scale="jac",
            ftol=1e-14, xtol=1e-14, gtol=1e-12, max_nfev=FIT_MAX_EVALUATIONS, args=(y, levels),
        )
        if best is None or result.cost < best.cost:
            best = result

    w1, a, m1, b, m2 = _unpack(best.x)
    components = sorted([(w1, a / scale, center + scale * m1), (1.0 - w1, b / scale, center + scale * m2)],
                        key=lambda c: c[2])
    (c1w, c1s, c1m), (c2w, c2s, c2m) = components
    cdf = DoubleLogisticCdf(c1w, c1s, c1m, c2w, c2s, c2m)

    residual = np.asarray(cdf_eval(cdf, values)) - levels
    fit_rms = float(np.sqrt(np.mean(residual**2)))
    max_abs = float(np.max(np.abs(residual)))
    degraded = best.status == 0
    if degraded:
        logger.warning("Double-logistic fit hit the evaluation cap (rms %.3g)", fit_rms)
    if max_abs > _FIT_TOLERANCE:
        logger.warning("Double-logistic fit misses a level by %.3g", max_abs)
    return FitResult(cdf, fit_rms, max_abs, degraded)


def fit_forecast(forecast: QuantileForecast, min_spread_kw: float | None = None, workers: int = 1) -> list[FitResult]:
    """Fit every step independently; results are returned in step order."""
    def fit(step: QuantileStep) -> FitResult:
        return fit_double_logistic(step.levels, step.values, min_spread_kw=min_spread_kw)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fit, forecast.steps))
    else:
        results = [fit(step) for step in forecast.steps]

    degraded = [k for k, r in enumerate(results) if r.degraded]
    logger.info("Fitted %d steps (max rms %.3g)", len(results), max(r.fit_rms for r in results))
    if degraded:
        logger.warning("Degraded fits at steps %s", degraded)
    return results


def center(fitted: Sequence[DoubleLogisticCdf], step_hours: float = DEFAULT_STEP_HOURS,
           start_hour: int = DEFAULT_START_HOUR) -> ProsumptionModel:
    """
    Split each fitted CDF into its mean and a zero-mean deviation CDF.

    ``p̂_L(k) = w1 w3 + w4 w6``; the deviation CDF has both locations
    shifted by ``-p̂_L(k)``.
    """
    stacked = DoubleLogisticCdf.stack(list(fitted))
    expected = np.asarray(stacked.mean, dtype=float)
    return ProsumptionModel(expected, stacked.shifted(-expected), stacked, step_hours, start_hour)


def write_fitted_model(path: Path, fits: Sequence[FitResult]) -> None:
    """Write the fitted-model JSON (array of ``{step, w1..w6, fit_rms}`` records)."""
    records = [
        {
            "step": k,
            **{f"w{i + 1}": float(w) for i, w in enumerate(fit.cdf.params)},
            "fit_rms": fit.fit_rms,
            "max_abs_residual": fit.max_abs_residual,
            "degraded": fit.degraded,
        }
        for k, fit in enumerate(fits)
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(records, f, indent=2)


def load_fitted_model(path: Path) -> list[FitResult]:
    """Read a fitted-model JSON written by :func:`write_fitted_model`."""
    with open(path, "r") as f:
        records = json.load(f)
    records = sorted(records, key=lambda r: r["step"])
    return [
        FitResult(
            DoubleLogisticCdf(*(float(r[f"w{i}"]) for i in range(1, 7))),
            float(r.get("fit_rms", 0.0)),
            float(r.get("max_abs_residual", r.get("fit_rms", 0.0))),
            bool(r.get("degraded", False)),
        )
        for r in records
    ]


class SyntheticProfile(ABC):
    """Abstract base class for synthetic prosumption days."""

    @abstractmethod
    def step_distribution(self, hour: float, rng: np.random.Generator) -> DoubleLogisticCdf:
        """Prosumption distribution at a clock hour."""
        pass


def _pv_shape(hour: float) -> float:
    """Normalized PV output, daylight from 06:00 to 20:00."""
    return max(0.0, float(np.sin(np.pi * (hour - 6.0) / 14.0))) if 6.0 <= hour <= 20.0 else 0.0


def _consumption(hour: float) -> float:
    return 0.4 + 0.6 * np.exp(-((hour - 7.5) / 1.5) ** 2) + 0.9 * np.exp(-((hour - 19.0) / 2.0) ** 2)


def _skewed(mean: float, scale: float, minor_mass: float, minor_offset: float, minor_scale: float) -> DoubleLogisticCdf:
    """Main logistic plus a minor one ``minor_offset`` away, shifted to ``mean``."""
    raw_mean = minor_mass * minor_offset
    main_loc = mean - raw_mean
    return DoubleLogisticCdf(1.0 - minor_mass, 1.0 / scale, main_loc, minor_mass, 1.0 / minor_scale,
                             main_loc + minor_offset)


class PvDominantProfile(SyntheticProfile):
    """PV surplus during the day, right-skewed uncertainty from passing clouds."""

    pv_peak_kw = 4.5

    def step_distribution(self, hour: float, rng: np.random.Generator) -> DoubleLogisticCdf:
        pv = _pv_shape(hour)
        mean = _consumption(hour) - self.pv_peak_kw * pv + rng.normal(0.0, 0.1)
        scale = 0.15 + 0.5 * pv + rng.uniform(0.0, 0.05)
        return _skewed(mean, scale, 0.25, 2.5 * scale, 1.5 * scale)


class FlatProfile(SyntheticProfile):
    """One curve for every step, drawn once per seed."""

    def __init__(self) -> None:
        self._cdf: DoubleLogisticCdf | None = None

    def step_distribution(self, hour: float, rng: np.random.Generator) -> DoubleLogisticCdf:
        if self._cdf is None:
            scale = 0.3 + rng.uniform(0.0, 0.1)
            self._cdf = _skewed(0.5 + rng.normal(0.0, 0.1), scale, 0.2, 2.0 * scale, scale)
        return self._cdf


class AsymmetricMorningProfile(PvDominantProfile):
    """PV day whose first step carries a rare high-consumption peak near 5 kW."""

    def __init__(self, start_hour: float) -> None:
        self.start_hour = start_hour

    def step_distribution(self, hour: float, rng: np.random.Generator) -> DoubleLogisticCdf:
        base = super().step_distribution(hour, rng)
        if hour != self.start_hour:
            return base
        scale = 0.2
        return _skewed(float(base.mean), scale, 0.1, 5.0, 0.4)


def create_synthetic_profile(name: str, start_hour: float = DEFAULT_START_HOUR) -> SyntheticProfile:
    """
    Factory function for the named synthetic profiles.

    Raises:
        UnknownProfileError: If the profile name is not known
    """
    if name == "pv_dominant":
        return PvDominantProfile()
    elif name == "flat":
        return FlatProfile()
    elif name == "asymmetric_morning":
        return AsymmetricMorningProfile(start_hour)
    else:
        raise UnknownProfileError(
            f"Unknown synthetic profile: {name}. Supported: pv_dominant, flat, asymmetric_morning"
        )


def synth_forecast(seed: int, profile: str, horizon: int = DEFAULT_HORIZON, start_hour: int = DEFAULT_START_HOUR,
                   step_hours: float = DEFAULT_STEP_HOURS,
                   levels: Sequence[float] = QUANTILE_LEVELS) -> QuantileForecast:
    """Deterministic synthetic quantile forecast for tests and demos."""
    builder = create_synthetic_profile(profile, start_hour)
    rng = np.random.default_rng(seed)
    level_array = np.asarray(levels, dtype=float)
    steps = []
    for k in range(horizon):
        hour = (start_hour + k * step_hours) % 24
        cdf = builder.step_distribution(hour, rng)
        steps.append(QuantileStep(level_array.copy(), np.asarray(quantile(cdf, level_array), dtype=float)))
    return QuantileForecast(tuple(steps), step_hours=step_hours, start_hour=start_hour)
