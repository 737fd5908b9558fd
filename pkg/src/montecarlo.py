"""Monte-Carlo oracle for the analytic schedule quantities.

Prosumption realizations are drawn by inverse-transform sampling of each
step's marginal, replayed through the clamp allocation rule and the exact
battery loss, and summarized into statistics that are checked against the
values a :class:`ScheduleSolution` reports.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from battery import BatterySpec
from constants import FEASIBILITY_TOL, ZERO_DEVIATION_TOL
from forecast_model import ProsumptionModel
from mixed_rv import DoubleLogisticCdf, pdf_eval, quantile
from scheduler import ScheduleSolution

logger = logging.getLogger(__name__)

_UNIT_LOW = np.finfo(float).tiny
_UNIT_HIGH = np.nextafter(1.0, 0.0)
# Starting points of the sampler's quantile inversion, interpolated in log-odds
_TABLE_LOGITS = np.linspace(-34.0, 34.0, 2049)


@dataclass(frozen=True)
class McConfig:
    """
    Monte-Carlo settings.

    Attributes:
        sample_count: Number of sampled days
        seed: Seed of the counter-based streams
        antithetic: Pair every uniform draw ``u`` with ``1 - u``
        batch_size: Samples per batch; batch ``i`` uses stream ``Philox(seed).jumped(i)``
    """

    sample_count: int = 1_000_000
    seed: int = 0
    antithetic: bool = False
    batch_size: int = 100_000

    def __post_init__(self) -> None:
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be at least 1, got {self.sample_count}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")

    def batches(self) -> list[int]:
        """Sample count of every batch, in stream order."""
        full, rest = divmod(self.sample_count, self.batch_size)
        return [self.batch_size] * full + ([rest] if rest else [])


def _inverse_table(F: DoubleLogisticCdf) -> NDArray[np.float64]:
    """Exact quantiles of every step on a grid of log-odds, shape ``(K, len(_TABLE_LOGITS))``."""
    levels = expit(_TABLE_LOGITS)
    return np.array([np.asarray(quantile(F.step(k), levels)) for k in range(F.size)])


def _sample_batch(model: ProsumptionModel, size: int, batch_index: int, cfg: McConfig,
                  table: NDArray[np.float64]) -> NDArray[np.float64]:
    rng = np.random.Generator(np.random.Philox(cfg.seed).jumped(batch_index))
    if cfg.antithetic:
        half = rng.random((-(-size // 2), model.horizon))
        u = np.concatenate([half, 1.0 - half])[:size]
    else:
        u = rng.random((size, model.horizon))
    u = np.clip(u, _UNIT_LOW, _UNIT_HIGH)
    log_odds = np.log(u) - np.log1p(-u)
    guess = np.column_stack([np.interp(log_odds[:, k], _TABLE_LOGITS, table[k]) for k in range(model.horizon)])
    return model.expected + np.asarray(quantile(model.centered, u, guess=guess))


def sample_prosumption(model: ProsumptionModel, cfg: McConfig) -> NDArray[np.float64]:
    """
    Draw prosumption realizations, steps independent.

    Returns:
        Matrix of shape ``(sample_count, horizon)`` in kW
    """
    table = _inverse_table(model.centered)
    batches = [_sample_batch(model, size, i, cfg, table) for i, size in enumerate(cfg.batches())]
    return np.concatenate(batches, axis=0)


@dataclass(frozen=True)
class Rollouts:
    """Sample-by-step replay of one schedule; state arrays have K + 1 columns."""

    deviation: NDArray[np.float64]
    battery_dev: NDArray[np.float64]
    grid_dev: NDArray[np.float64]
    grid_power: NDArray[np.float64]
    exact_energy: NDArray[np.float64]
    model_energy: NDArray[np.float64]
    lower_envelope: NDArray[np.float64]
    upper_envelope: NDArray[np.float64]

    @property
    def sample_count(self) -> int:
        return int(self.deviation.shape[0])


def _roll_states(e0: float, increments: NDArray[np.float64]) -> NDArray[np.float64]:
    states = np.empty((increments.shape[0], increments.shape[1] + 1))
    states[:, 0] = e0
    np.cumsum(increments, axis=1, out=states[:, 1:])
    states[:, 1:] += e0
    return states


def simulate_allocation(realizations: NDArray[np.float64], sol: ScheduleSolution, spec: BatterySpec) -> Rollouts:
    """
    Replay the allocation rule on sampled prosumption.

    The battery takes ``clamp(ΔP_L, x_lower, x_upper)`` and the grid takes
    the rest. The exact state pays ``t μ |p_B + ΔP_{L→B}|``; the model
    state splits that loss as ``t μ (|p_B| + |ΔP_{L→B}|)``.
    """
    realizations = np.atleast_2d(realizations)
    if realizations.shape[1] != sol.horizon:
        raise ValueError(f"realizations cover {realizations.shape[1]} steps, the schedule {sol.horizon}")
    t, mu = spec.step_hours, spec.loss_coefficient
    p_B = sol.decision.p_battery

    deviation = realizations - sol.expected_prosumption
    battery_dev = np.clip(deviation, sol.decision.x_lower, sol.decision.x_upper)
    grid_dev = deviation - battery_dev
    total = p_B + battery_dev

    exact = _roll_states(spec.e0, -t * total - t * mu * np.abs(total))
    modelled = _roll_states(spec.e0, -t * total - t * mu * (np.abs(p_B) + np.abs(battery_dev)))
    return Rollouts(
        deviation=deviation,
        battery_dev=battery_dev,
        grid_dev=grid_dev,
        grid_power=sol.p_grid + grid_dev,
        exact_energy=exact,
        model_energy=modelled,
        lower_envelope=sol.trajectory.lower_envelope,
        upper_envelope=sol.trajectory.upper_envelope,
    )


@dataclass(frozen=True)
class RolloutStats:
    """Empirical per-step statistics of the rollouts (state arrays have K + 1 entries)."""

    sample_count: int
    p1: NDArray[np.float64]
    p2: NDArray[np.float64]
    zero_atom_freq: NDArray[np.float64]
    mean_grid_dev_neg: NDArray[np.float64]
    mean_grid_dev_pos: NDArray[np.float64]
    mean_battery_dev: NDArray[np.float64]
    mean_deviation: NDArray[np.float64]
    std_grid_dev_neg: NDArray[np.float64]
    std_grid_dev_pos: NDArray[np.float64]
    std_battery_dev: NDArray[np.float64]
    std_deviation: NDArray[np.float64]
    grid_dev_q05: NDArray[np.float64]
    grid_dev_q95: NDArray[np.float64]
    envelope_violations: NDArray[np.int64]
    exact_state_mean: NDArray[np.float64]
    model_state_mean: NDArray[np.float64]
    allocation_residual: float
    loss_approximation_excess_kwh: float


@dataclass
class _StatsAccumulator:
    """Merges batches in the order they are added."""

    count: int = 0
    sums: dict[str, NDArray[np.float64]] = field(default_factory=dict)
    violations: NDArray[np.int64] | None = None
    grid_devs: list[NDArray[np.float32]] = field(default_factory=list)
    allocation_residual: float = 0.0
    excess: float = 0.0

    def _add(self, name: str, values: NDArray[np.float64]) -> None:
        total = values.sum(axis=0)
        self.sums[name] = self.sums[name] + total if name in self.sums else total

    def add(self, r: Rollouts) -> None:
        below = r.grid_dev < -ZERO_DEVIATION_TOL
        above = r.grid_dev > ZERO_DEVIATION_TOL
        neg = np.where(below, r.grid_dev, 0.0)
        pos = np.where(above, r.grid_dev, 0.0)
        for name, values in (("below", below), ("above", above), ("neg", neg), ("pos", pos),
                             ("battery", r.battery_dev), ("deviation", r.deviation),
                             ("exact", r.exact_energy), ("model", r.model_energy)):
            values = values.astype(float)
            self._add(name, values)
            if name in ("neg", "pos", "battery", "deviation"):
                self._add(f"{name}_sq", values**2)

        lower = r.lower_envelope - FEASIBILITY_TOL
        upper = r.upper_envelope + FEASIBILITY_TOL
        outside = (r.model_energy < lower) | (r.model_energy > upper) | (r.exact_energy < lower)
        counts = outside[:, 1:].sum(axis=0)
        self.violations = counts if self.violations is None else self.violations + counts

        self.grid_devs.append(r.grid_dev.astype(np.float32))
        residual = np.abs(r.battery_dev + r.grid_dev - r.deviation)
        self.allocation_residual = max(self.allocation_residual, float(residual.max()))
        self.excess = max(self.excess, float(np.max(r.exact_energy - r.upper_envelope)))
        self.count += r.sample_count

    def finalize(self) -> RolloutStats:
        n = self.count
        mean = {name: total / n for name, total in self.sums.items()}

        def std(name: str) -> NDArray[np.float64]:
            return np.sqrt(np.maximum(mean[f"{name}_sq"] - mean[name] ** 2, 0.0))

        grid = np.concatenate(self.grid_devs, axis=0)
        q05, q95 = np.quantile(grid, [0.05, 0.95], axis=0, method="inverted_cdf").astype(float)
        return RolloutStats(
            sample_count=n,
            p1=mean["below"],
            p2=mean["above"],
            zero_atom_freq=1.0 - mean["below"] - mean["above"],
            mean_grid_dev_neg=mean["neg"],
            mean_grid_dev_pos=mean["pos"],
            mean_battery_dev=mean["battery"],
            mean_deviation=mean["deviation"],
            std_grid_dev_neg=std("neg"),
            std_grid_dev_pos=std("pos"),
            std_battery_dev=std("battery"),
            std_deviation=std("deviation"),
            grid_dev_q05=q05,
            grid_dev_q95=q95,
            envelope_violations=self.violations,
            exact_state_mean=mean["exact"],
            model_state_mean=mean["model"],
            allocation_residual=self.allocation_residual,
            loss_approximation_excess_kwh=max(self.excess, 0.0),
        )


def empirical_stats(rollouts: Rollouts) -> RolloutStats:
    """Statistics of one set of rollouts; zero-atom samples have ``|grid dev| < 1e-12``."""
    accumulator = _StatsAccumulator()
    accumulator.add(rollouts)
    return accumulator.finalize()


def run_oracle(model: ProsumptionModel, sol: ScheduleSolution, spec: BatterySpec, cfg: McConfig) -> RolloutStats:
    """Sample, replay and summarize batch by batch without holding every rollout."""
    accumulator = _StatsAccumulator()
    table = _inverse_table(model.centered)
    for i, size in enumerate(cfg.batches()):
        accumulator.add(simulate_allocation(_sample_batch(model, size, i, cfg, table), sol, spec))
        logger.debug("Monte-Carlo batch %d: %d samples", i, size)
    stats = accumulator.finalize()
    logger.info("Monte-Carlo oracle: %d samples, %d envelope violations, loss-approximation excess %.3g kWh",
                stats.sample_count, int(stats.envelope_violations.sum()), stats.loss_approximation_excess_kwh)
    return stats


@dataclass(frozen=True)
class TolerancePolicy:
    """Statistical acceptance bands for analytic-versus-empirical checks."""

    binomial_sigmas: float = 3.0
    probability_floor: float = 1e-3
    mean_sigmas: float = 4.0
    expectation_floor: float = 1e-3
    quantile_sigmas: float = 4.0
    quantile_floor: float = 0.01
    state_slack: float = 1e-9
    allocation_slack: float = 1e-9

    def probability(self, p: NDArray[np.float64], n: int) -> NDArray[np.float64]:
        p = np.clip(p, 0.0, 1.0)
        return np.maximum(self.binomial_sigmas * np.sqrt(p * (1.0 - p) / n), self.probability_floor)

    def expectation(self, std: NDArray[np.float64], n: int) -> NDArray[np.float64]:
        return np.maximum(self.mean_sigmas * std / np.sqrt(n), self.expectation_floor)

    def quantile(self, q: float, density: NDArray[np.float64], n: int) -> NDArray[np.float64]:
        with np.errstate(divide="ignore"):
            band = self.quantile_sigmas * np.sqrt(q * (1.0 - q) / n) / density
        return np.maximum(np.nan_to_num(band, nan=0.0, posinf=0.0), self.quantile_floor)


@dataclass(frozen=True)
class CheckRecord:
    quantity: str
    step: int | None
    analytic: float
    empirical: float
    tolerance: float
    passed: bool

    def as_dict(self) -> dict:
        return {"quantity": self.quantity, "step": self.step, "analytic": self.analytic,
                "empirical": self.empirical, "tolerance": self.tolerance, "pass": self.passed}


@dataclass(frozen=True)
class ComparisonReport:
    records: list[CheckRecord]
    sample_count: int
    loss_approximation_excess_kwh: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def failures(self, quantity: str | None = None) -> list[CheckRecord]:
        return [r for r in self.records if not r.passed and (quantity is None or r.quantity == quantity)]

    def summary(self) -> dict:
        failed = self.failures()
        return {
            "passed": self.passed,
            "checks": len(self.records),
            "failed": len(failed),
            "failed_quantities": sorted({r.quantity for r in failed}),
            "sample_count": self.sample_count,
            "loss_approximation_excess_kwh": self.loss_approximation_excess_kwh,
        }


def compare(sol: ScheduleSolution, stats: RolloutStats, policy: TolerancePolicy = TolerancePolicy()) -> ComparisonReport:
    """
    Check every analytic quantity against its empirical counterpart.

    Probabilities use ``max(3 binomial σ, 1e-3)``, expectations
    ``max(4 σ / √N, 1e-3)``, grid quantiles ``max(0.01, 4 √(q(1-q)/N) / f)``
    with ``f`` the grid-deviation density at the analytic quantile.
    Envelope violations must be zero and the exact-loss mean state must not
    fall below the model state.
    """
    n = stats.sample_count
    records: list[CheckRecord] = []

    def per_step(name: str, analytic: NDArray[np.float64], empirical: NDArray[np.float64],
                 tolerance: NDArray[np.float64]) -> None:
        for k in range(sol.horizon):
            diff = abs(float(analytic[k]) - float(empirical[k]))
            records.append(CheckRecord(name, k, float(analytic[k]), float(empirical[k]), float(tolerance[k]),
                                       bool(diff <= tolerance[k])))

    per_step("p1", sol.p1, stats.p1, policy.probability(sol.p1, n))
    per_step("p2", sol.p2, stats.p2, policy.probability(sol.p2, n))
    per_step("zero_atom_mass", sol.zero_atom_mass, stats.zero_atom_freq, policy.probability(sol.zero_atom_mass, n))
    per_step("exp_grid_dev_neg", sol.exp_grid_dev_neg, stats.mean_grid_dev_neg,
             policy.expectation(stats.std_grid_dev_neg, n))
    per_step("exp_grid_dev_pos", sol.exp_grid_dev_pos, stats.mean_grid_dev_pos,
             policy.expectation(stats.std_grid_dev_pos, n))
    per_step("exp_battery_dev", sol.exp_battery_dev, stats.mean_battery_dev,
             policy.expectation(stats.std_battery_dev, n))
    per_step("expectation_sum", np.zeros(sol.horizon), stats.mean_battery_dev + stats.mean_grid_dev_neg
             + stats.mean_grid_dev_pos, policy.expectation(stats.std_deviation, n))

    F, xl, xu = sol.deviation_cdf, sol.decision.x_lower, sol.decision.x_upper
    for q, name, analytic, empirical in ((0.05, "grid_dev_q05", sol.grid_dev_q05, stats.grid_dev_q05),
                                         (0.95, "grid_dev_q95", sol.grid_dev_q95, stats.grid_dev_q95)):
        density = np.where(analytic < 0, pdf_eval(F, analytic + xl),
                           np.where(analytic > 0, pdf_eval(F, analytic + xu), np.inf))
        per_step(name, analytic, empirical, policy.quantile(q, density, n))

    per_step("envelope_violations", np.zeros(sol.horizon), stats.envelope_violations.astype(float),
             np.zeros(sol.horizon))
    shortfall = np.maximum(stats.model_state_mean - stats.exact_state_mean, 0.0)[1:]
    per_step("loss_conservativeness", np.zeros(sol.horizon), shortfall, np.full(sol.horizon, policy.state_slack))
    records.append(CheckRecord("allocation_completeness", None, 0.0, stats.allocation_residual,
                               policy.allocation_slack, stats.allocation_residual <= policy.allocation_slack))

    report = ComparisonReport(records, n, stats.loss_approximation_excess_kwh)
    if report.passed:
        logger.info("All %d oracle checks passed", len(records))
    else:
        logger.warning("Oracle checks failed: %s", ", ".join(report.summary()["failed_quantities"]))
    return report


def write_comparison_json(path: Path, report: ComparisonReport) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump({"summary": report.summary(), "checks": [r.as_dict() for r in report.records]}, f, indent=2)
