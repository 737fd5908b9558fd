"""Battery energy-state dynamics: nominal trajectory, uncertainty envelopes, feasibility."""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray

from constants import DEFAULT_STEP_HOURS, FEASIBILITY_TOL, REFERENCE_BATTERY
from mixed_rv import AllocationBounds, FloatOrArray

logger = logging.getLogger(__name__)


class InvalidBatterySpecError(ValueError):
    """Battery limits are inconsistent."""


@dataclass(frozen=True)
class BatterySpec:
    """
    Physical battery limits.

    Positive power discharges the battery (``P_L = P_B + P_G``), so a
    positive ``p_B`` lowers the stored energy.

    Attributes:
        e_min, e_max: Energy limits in kWh
        p_min, p_max: Power limits in kW (``p_min < 0 < p_max``)
        loss_coefficient: Charging/discharging loss share ``μ`` in [0, 1)
        e0: Initial energy in kWh, half of ``e_max`` when omitted
        step_hours: Step duration ``t`` in hours
    """

    e_min: float
    e_max: float
    p_min: float
    p_max: float
    loss_coefficient: float
    e0: float | None = None
    step_hours: float = DEFAULT_STEP_HOURS

    def __post_init__(self) -> None:
        if self.e0 is None:
            object.__setattr__(self, "e0", 0.5 * self.e_max)
        if not self.e_min < self.e_max:
            raise InvalidBatterySpecError(f"e_min ({self.e_min}) must be below e_max ({self.e_max})")
        if not self.e_min <= self.e0 <= self.e_max:
            raise InvalidBatterySpecError(f"e0 ({self.e0}) must lie in [{self.e_min}, {self.e_max}]")
        if not self.p_min < 0 < self.p_max:
            raise InvalidBatterySpecError(f"power limits must satisfy p_min < 0 < p_max, got [{self.p_min}, {self.p_max}]")
        if not 0 <= self.loss_coefficient < 1:
            raise InvalidBatterySpecError(f"loss_coefficient must lie in [0, 1), got {self.loss_coefficient}")
        if self.step_hours <= 0:
            raise InvalidBatterySpecError(f"step_hours must be positive, got {self.step_hours}")

    @classmethod
    def reference(cls, **overrides: float) -> "BatterySpec":
        """The 13.5 kWh / 5 kW home battery, optionally with overrides."""
        return cls(**{**REFERENCE_BATTERY, **overrides})

    def with_initial_energy(self, e0: float) -> "BatterySpec":
        return replace(self, e0=e0)


def nominal_step(e: FloatOrArray, p_B: FloatOrArray, spec: BatterySpec) -> FloatOrArray:
    """``e - t p_B - t μ |p_B|``."""
    t, mu = spec.step_hours, spec.loss_coefficient
    return e - t * p_B - t * mu * np.abs(p_B)


def envelope_step(delta_e_min: FloatOrArray, delta_e_max: FloatOrArray, b: AllocationBounds,
                  spec: BatterySpec) -> tuple[FloatOrArray, FloatOrArray]:
    """
    Advance the worst-case energy envelopes by one step.

    Losses on the deviation part are split off with the triangle inequality,
    so the lower envelope pays ``(1 + μ)`` per kWh discharged and the upper
    envelope gains ``(1 - μ)`` per kWh charged.
    """
    t, mu = spec.step_hours, spec.loss_coefficient
    return (delta_e_min - t * b.x_upper * (1.0 + mu),
            delta_e_max - t * b.x_lower * (1.0 - mu))


def expected_state_step(e_exp: FloatOrArray, p_B: FloatOrArray, exp_dev: FloatOrArray,
                        spec: BatterySpec) -> FloatOrArray:
    """Propagate the expected total battery power ``p_B + exp_dev`` with the nominal loss rule."""
    return nominal_step(e_exp, np.asarray(p_B) + exp_dev, spec)


@dataclass(frozen=True)
class BatteryTrajectory:
    """
    Battery states over a horizon of K steps.

    State arrays hold K + 1 entries (index 0 is the initial state); power
    arrays hold K entries.
    """

    energy: NDArray[np.float64]
    delta_e_min: NDArray[np.float64]
    delta_e_max: NDArray[np.float64]
    expected_energy: NDArray[np.float64]
    battery_power: NDArray[np.float64]

    @property
    def horizon(self) -> int:
        return int(self.battery_power.size)

    @property
    def lower_envelope(self) -> NDArray[np.float64]:
        return self.energy + self.delta_e_min

    @property
    def upper_envelope(self) -> NDArray[np.float64]:
        return self.energy + self.delta_e_max


def _accumulate(initial: float, increments: NDArray[np.float64]) -> NDArray[np.float64]:
    return initial + np.concatenate(([0.0], np.cumsum(increments)))


def simulate_trajectory(p_B: ArrayLike, x_lower: ArrayLike, x_upper: ArrayLike, exp_dev: ArrayLike | None,
                        spec: BatterySpec) -> BatteryTrajectory:
    """
    Assemble nominal, envelope and expected-state trajectories.

    Args:
        p_B: Nominal battery power per step (kW)
        x_lower, x_upper: Allocation bounds per step (kW)
        exp_dev: Expected battery deviation per step (kW), zeros when None
        spec: Battery limits, initial state and step duration

    Returns:
        BatteryTrajectory starting from ``spec.e0`` with zero envelopes
    """
    p_B = np.asarray(p_B, dtype=float)
    bounds = AllocationBounds(np.asarray(x_lower, dtype=float), np.asarray(x_upper, dtype=float))
    exp_dev = np.zeros_like(p_B) if exp_dev is None else np.asarray(exp_dev, dtype=float)
    if not (p_B.shape == np.shape(bounds.x_lower) == np.shape(bounds.x_upper) == exp_dev.shape):
        raise ValueError("p_B, bounds and expected deviation must share one horizon")

    zeros = np.zeros_like(p_B)
    step_min, step_max = envelope_step(zeros, zeros, bounds, spec)
    return BatteryTrajectory(
        energy=_accumulate(spec.e0, nominal_step(0.0, p_B, spec)),
        delta_e_min=_accumulate(0.0, step_min),
        delta_e_max=_accumulate(0.0, step_max),
        expected_energy=_accumulate(spec.e0, expected_state_step(0.0, p_B, exp_dev, spec)),
        battery_power=p_B,
    )


@dataclass(frozen=True)
class Violation:
    """One violated battery constraint."""

    step: int
    constraint: str
    magnitude: float


@dataclass(frozen=True)
class FeasibilityReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return not self.violations

    @property
    def max_violation(self) -> float:
        return max((v.magnitude for v in self.violations), default=0.0)

    def first(self, constraint: str | None = None) -> Violation | None:
        """Earliest violation, optionally of one constraint kind."""
        matching = [v for v in self.violations if constraint is None or v.constraint == constraint]
        return min(matching, key=lambda v: v.step, default=None)


def check_feasible(traj: BatteryTrajectory, bounds: AllocationBounds, spec: BatterySpec,
                   tol: float = FEASIBILITY_TOL) -> FeasibilityReport:
    """
    Check envelope energies and deviation-inclusive powers against the limits.

    Energy constraints are checked on every state (index 0 is the initial
    state), power constraints on steps 0..K-1 as ``p_min <= p_B + x_lower``
    and ``p_B + x_upper <= p_max``.

    Raises:
        ValueError: If trajectory and bounds differ in length
    """
    x_lower = np.atleast_1d(np.asarray(bounds.x_lower, dtype=float))
    x_upper = np.atleast_1d(np.asarray(bounds.x_upper, dtype=float))
    if not x_lower.size == x_upper.size == traj.horizon:
        raise ValueError(f"trajectory has {traj.horizon} steps but bounds have {x_lower.size}")

    checks = {
        "energy_min": spec.e_min - traj.lower_envelope,
        "energy_max": traj.upper_envelope - spec.e_max,
        "power_min": spec.p_min - (traj.battery_power + x_lower),
        "power_max": traj.battery_power + x_upper - spec.p_max,
    }
    violations = []
    for name, excess in checks.items():
        for k in np.flatnonzero(excess > tol):
            violations.append(Violation(int(k), name, float(excess[k])))
    violations.sort(key=lambda v: (v.step, v.constraint))

    if violations:
        logger.debug("%d battery constraint violations, worst %.3g", len(violations),
                     max(v.magnitude for v in violations))
    return FeasibilityReport(violations)
