"""
Probabilistic battery scheduling as a nonlinear stochastic program.

Decision variables per step are the nominal battery power ``p_B`` and the
allocation bounds ``x_lower <= 0 <= x_upper``. Battery energies and
envelopes are eliminated by forward substitution, which leaves ``4K``
inequality constraints over a box. The program is solved with an
augmented Lagrangian: multipliers and penalty are updated in an outer
loop, each inner problem is a box-constrained L-BFGS-B minimization.
"""

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import OptimizeResult, minimize

from battery import BatterySpec, BatteryTrajectory, simulate_trajectory
from constants import (
    ABS_SMOOTHING_SHARPNESS,
    CASE_WEIGHTS,
    COMPLEMENTARITY_SLACK,
    CRITICAL_WINDOW,
    FEASIBILITY_TOL,
    GRADIENT_MODES,
    PAIRING_MODES,
)
from forecast_model import ProsumptionModel
from mixed_rv import (
    AllocationBounds,
    DoubleLogisticCdf,
    QuadratureConfig,
    atom_probs,
    build_grid_dev,
    conditional_grid_expectations,
    expected_battery_dev,
    expected_grid_dev_neg,
    expected_grid_dev_pos,
    grid_dev_quantile,
    pdf_eval,
)

logger = logging.getLogger(__name__)

PLOT_COLUMNS = [
    "step", "p_g_nominal", "q05", "q95", "prob_up", "prob_down", "exp_up", "exp_down",
    "e_nominal", "e_min_env", "e_max_env", "e_expected",
]


class ProblemDefinitionError(ValueError):
    """Inputs of a scheduling problem do not fit together."""


class InfeasibleSpecError(ValueError):
    """The battery cannot satisfy its limits before any optimization."""


@dataclass(frozen=True)
class CostWeights:
    """
    Cost-function weights.

    Attributes:
        c1: Weight of squared grid import (per kW²)
        c2: Weight of squared grid export (per kW²)
        c3: Per-step weight of upward grid deviations (per kW)
        c4: Per-step weight of downward grid deviations (per kW)
    """

    c1: float
    c2: float
    c3: NDArray[np.float64]
    c4: NDArray[np.float64]

    def __post_init__(self) -> None:
        object.__setattr__(self, "c3", np.atleast_1d(np.asarray(self.c3, dtype=float)))
        object.__setattr__(self, "c4", np.atleast_1d(np.asarray(self.c4, dtype=float)))
        if self.c1 < 0 or self.c2 < 0 or np.any(self.c3 < 0) or np.any(self.c4 < 0):
            raise ValueError("cost weights must be non-negative")
        if self.c3.shape != self.c4.shape:
            raise ValueError("c3 and c4 must have one entry per step")

    @property
    def horizon(self) -> int:
        return int(self.c3.size)

    @classmethod
    def uniform(cls, c1: float, c2: float, c3: float, c4: float, horizon: int) -> "CostWeights":
        return cls(c1, c2, np.full(horizon, float(c3)), np.full(horizon, float(c4)))

    @classmethod
    def preset(cls, name: str, horizon: int, critical_window: tuple[int, ...] = CRITICAL_WINDOW) -> "CostWeights":
        """
        Expand a named case (``case1``, ``case2``, ``case3``) to per-step weights.

        Raises:
            ValueError: If the case name is unknown
        """
        if name not in CASE_WEIGHTS:
            raise ValueError(f"Unknown case: {name}. Supported: {', '.join(CASE_WEIGHTS)}")
        preset = CASE_WEIGHTS[name]
        weights = cls.uniform(preset["c1"], preset["c2"], preset["c3"], preset["c4"], horizon)
        if "c4_critical" in preset:
            window = [k for k in critical_window if 0 <= k < horizon]
            weights.c4[window] = preset["c4_critical"]
        return weights


@dataclass(frozen=True)
class SolverConfig:
    """
    Augmented-Lagrangian settings.

    Attributes:
        max_outer_iterations: Multiplier/penalty updates before giving up
        max_inner_iterations: L-BFGS-B iteration cap per inner solve
        inner_tolerance: Projected-gradient tolerance, relative to ``max(1, |f|)``
        constraint_tolerance: Maximum constraint violation accepted as feasible
        penalty_growth: Factor applied to the penalty when the violation stalls
        initial_penalty: Starting penalty parameter
        max_penalty: Upper limit of the penalty parameter
        max_multiplier: Upper limit of every constraint multiplier
        complementarity_slack: Bound on ``|p⁺ p⁻|`` of the signed power splits
        gradient_mode: ``analytic`` or ``finite-difference``
        restarts: Extra perturbed starts after the warm start
        seed: Seed of the restart perturbations
    """

    max_outer_iterations: int = 50
    max_inner_iterations: int = 1000
    inner_tolerance: float = 1e-5
    constraint_tolerance: float = FEASIBILITY_TOL
    penalty_growth: float = 10.0
    initial_penalty: float = 10.0
    max_penalty: float = 1e8
    max_multiplier: float = 1e10
    complementarity_slack: float = COMPLEMENTARITY_SLACK
    gradient_mode: str = "analytic"
    restarts: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.inner_tolerance, self.constraint_tolerance, self.complementarity_slack, self.initial_penalty) <= 0:
            raise ValueError("solver tolerances and the initial penalty must be positive")
        if self.penalty_growth <= 1:
            raise ValueError(f"penalty_growth must exceed 1, got {self.penalty_growth}")
        if self.max_penalty < self.initial_penalty or self.max_multiplier <= 0:
            raise ValueError("max_penalty must be at least initial_penalty and max_multiplier positive")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}, got {self.gradient_mode}")
        if self.max_outer_iterations < 1 or self.max_inner_iterations < 1 or self.restarts < 0:
            raise ValueError("iteration caps must be positive and restarts non-negative")


@dataclass(frozen=True)
class DecisionVector:
    """Per-step nominal battery power and allocation bounds (kW)."""

    p_battery: NDArray[np.float64]
    x_lower: NDArray[np.float64]
    x_upper: NDArray[np.float64]

    @property
    def horizon(self) -> int:
        return int(self.p_battery.size)

    def as_array(self) -> NDArray[np.float64]:
        return np.concatenate([self.p_battery, self.x_lower, self.x_upper])

    @classmethod
    def from_array(cls, x: ArrayLike) -> "DecisionVector":
        p, xl, xu = np.split(np.asarray(x, dtype=float), 3)
        return cls(p, xl, xu)

    @classmethod
    def zeros(cls, horizon: int) -> "DecisionVector":
        return cls(np.zeros(horizon), np.zeros(horizon), np.zeros(horizon))


@dataclass(frozen=True)
class KktDiagnostics:
    """First-order optimality diagnostics of a schedule."""

    stationarity: float
    max_violation: float
    max_complementarity: float
    split_complementarity: float
    step_violation: NDArray[np.float64]

    @property
    def worst_step(self) -> int:
        return int(np.argmax(self.step_violation))

    def as_dict(self) -> dict:
        return {
            "stationarity": self.stationarity,
            "max_violation": self.max_violation,
            "max_complementarity": self.max_complementarity,
            "split_complementarity": self.split_complementarity,
            "worst_step": self.worst_step,
        }


@dataclass(frozen=True)
class ScheduleSolution:
    """
    Probabilistic battery and dispatch schedule with its derived quantities.

    Per-step arrays have K entries except the battery states in
    ``trajectory``, which have K + 1.
    """

    decision: DecisionVector
    expected_prosumption: NDArray[np.float64]
    deviation_cdf: DoubleLogisticCdf
    trajectory: BatteryTrajectory
    p1: NDArray[np.float64]
    p2: NDArray[np.float64]
    exp_grid_dev_neg: NDArray[np.float64]
    exp_grid_dev_pos: NDArray[np.float64]
    exp_battery_dev: NDArray[np.float64]
    cond_grid_dev_down: NDArray[np.float64]
    cond_grid_dev_up: NDArray[np.float64]
    grid_dev_q05: NDArray[np.float64]
    grid_dev_q95: NDArray[np.float64]
    objective: float
    multipliers: NDArray[np.float64]
    converged: bool = False
    iterations: int = 0
    message: str = ""
    kkt: KktDiagnostics | None = None
    history: tuple[tuple[float, float], ...] = ()

    @property
    def horizon(self) -> int:
        return self.decision.horizon

    @property
    def p_grid(self) -> NDArray[np.float64]:
        return self.expected_prosumption - self.decision.p_battery

    @property
    def p_grid_pos(self) -> NDArray[np.float64]:
        return np.maximum(self.p_grid, 0.0)

    @property
    def p_grid_neg(self) -> NDArray[np.float64]:
        return np.minimum(self.p_grid, 0.0)

    @property
    def p_battery_pos(self) -> NDArray[np.float64]:
        return np.maximum(self.decision.p_battery, 0.0)

    @property
    def p_battery_neg(self) -> NDArray[np.float64]:
        return np.minimum(self.decision.p_battery, 0.0)

    @property
    def zero_atom_mass(self) -> NDArray[np.float64]:
        return np.maximum(1.0 - self.p1 - self.p2, 0.0)

    @property
    def bounds(self) -> AllocationBounds:
        return AllocationBounds(self.decision.x_lower, self.decision.x_upper)


def smooth_abs_over(p: ArrayLike, sharpness: float = ABS_SMOOTHING_SHARPNESS
                    ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """
    Softplus upper approximation of ``|p|`` and its derivative.

    ``(softplus(βp) + softplus(-βp)) / β`` exceeds ``|p|`` by at most
    ``2 ln 2 / β`` (reached at 0); the derivative is ``tanh(βp / 2)``.
    """
    p = np.asarray(p, dtype=float)
    u = sharpness * np.abs(p)
    return np.abs(p) + 2.0 * np.log1p(np.exp(-u)) / sharpness, np.tanh(0.5 * sharpness * p)


def smooth_abs_under(p: ArrayLike, sharpness: float = ABS_SMOOTHING_SHARPNESS
                     ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Lower approximation ``|p| (1 - exp(-β|p|))`` of ``|p|`` and its derivative."""
    p = np.asarray(p, dtype=float)
    u = sharpness * np.abs(p)
    decay = np.exp(-u)
    return np.abs(p) * (1.0 - decay), np.sign(p) * (1.0 - decay + u * decay)


def finite_difference_gradient(fun: Callable[[NDArray[np.float64]], float], x: ArrayLike,
                               h: float = 1e-5) -> NDArray[np.float64]:
    """Central-difference gradient of a scalar function."""
    x0 = np.asarray(x, dtype=float)
    logger.debug("Finite-difference gradient over %d variables (h=%g)", x0.size, h)
    grad = np.zeros_like(x0)
    for j in range(x0.size):
        x = x0.copy()
        x[j] = x0[j] + h
        f_plus = fun(x)
        x[j] = x0[j] - h
        f_minus = fun(x)
        grad[j] = (f_plus - f_minus) / (2 * h)
    return grad


@dataclass
class SchedulingProblem:
    """
    Objective, constraints and gradients over the 3K-dimensional decision space.

    Use :func:`build_problem` to construct one.
    """

    model: ProsumptionModel
    spec: BatterySpec
    weights: CostWeights
    quadrature: QuadratureConfig = field(default_factory=QuadratureConfig)
    pairing: str = "default"
    fixed_battery_power: NDArray[np.float64] | None = None
    _cumulative: NDArray[np.float64] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._cumulative = np.tril(np.ones((self.horizon, self.horizon)))

    @property
    def horizon(self) -> int:
        return self.model.horizon

    @property
    def n_variables(self) -> int:
        return 3 * self.horizon

    @property
    def allocation_fixed(self) -> bool:
        """True when no deviation is priced, so allocation bounds stay at zero."""
        return not (np.any(self.weights.c3 > 0) or np.any(self.weights.c4 > 0))

    @property
    def box(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Lower and upper variable bounds."""
        K, s = self.horizon, self.spec
        span = s.p_max - s.p_min
        lower = np.concatenate([np.full(K, s.p_min), np.full(K, -span), np.zeros(K)])
        upper = np.concatenate([np.full(K, s.p_max), np.zeros(K), np.full(K, span)])
        if self.allocation_fixed:
            lower[K:] = 0.0
            upper[K:] = 0.0
        if self.fixed_battery_power is not None:
            lower[:K] = self.fixed_battery_power
            upper[:K] = self.fixed_battery_power
        return lower, upper

    def _split(self, x: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]:
        p, xl, xu = np.split(np.asarray(x, dtype=float), 3)
        return p, np.minimum(xl, 0.0), np.maximum(xu, 0.0)

    def deviation_terms(self, x_lower: NDArray[np.float64], x_upper: NDArray[np.float64]) -> tuple:
        """``(p1, p2, E[ΔP_G^{<0}], E[ΔP_G^{>0}])`` per step."""
        F, b = self.model.centered, AllocationBounds(x_lower, x_upper)
        p1, p2 = atom_probs(F, b)
        neg = expected_grid_dev_neg(F, b, self.quadrature)
        pos = expected_grid_dev_pos(F, b, self.quadrature)
        return np.asarray(p1), np.asarray(p2), np.asarray(neg), np.asarray(pos)

    def objective(self, x: ArrayLike) -> float:
        p, xl, xu = self._split(x)
        p_grid = self.model.expected - p
        w = self.weights
        cost = w.c1 * np.sum(np.maximum(p_grid, 0.0) ** 2) + w.c2 * np.sum(np.minimum(p_grid, 0.0) ** 2)
        if self.allocation_fixed:
            return float(cost)
        p1, p2, neg, pos = self.deviation_terms(xl, xu)
        if self.pairing == "default":
            deviation = w.c3 * p2 * pos + w.c4 * p1 * (-neg)
        else:
            deviation = w.c3 * p1 * pos + w.c4 * p2 * neg
        return float(cost + np.sum(deviation))

    def gradient(self, x: ArrayLike) -> NDArray[np.float64]:
        """
        Analytic gradient.

        The expectation integrals depend on the bounds only through their
        limits, so by Leibniz ``dE^{<0}/dx_lower = -p1`` and
        ``dE^{>0}/dx_upper = -p2``, while ``dp1/dx_lower = f(x_lower)`` and
        ``dp2/dx_upper = -f(x_upper)``.
        """
        p, xl, xu = self._split(x)
        p_grid = self.model.expected - p
        w = self.weights
        grad_p = -2.0 * w.c1 * np.maximum(p_grid, 0.0) - 2.0 * w.c2 * np.minimum(p_grid, 0.0)
        if self.allocation_fixed:
            return np.concatenate([grad_p, np.zeros(self.horizon), np.zeros(self.horizon)])

        p1, p2, neg, pos = self.deviation_terms(xl, xu)
        f_lower = np.asarray(pdf_eval(self.model.centered, xl))
        f_upper = np.asarray(pdf_eval(self.model.centered, xu))
        if self.pairing == "default":
            grad_xl = w.c4 * (f_lower * (-neg) + p1 * p1)
            grad_xu = -w.c3 * (f_upper * pos + p2 * p2)
        else:
            grad_xl = w.c3 * f_lower * pos - w.c4 * p2 * p1
            grad_xu = -w.c3 * p1 * p2 - w.c4 * f_upper * neg
        return np.concatenate([grad_p, grad_xl, grad_xu])

    def objective_and_gradient(self, x: ArrayLike, gradient_mode: str = "analytic") -> tuple[float, NDArray[np.float64]]:
        if gradient_mode == "finite-difference":
            return self.objective(x), finite_difference_gradient(self.objective, x)
        return self.objective(x), self.gradient(x)

    def _constraint_blocks(self, x: ArrayLike, losses_low: NDArray[np.float64],
                           losses_high: NDArray[np.float64]) -> NDArray[np.float64]:
        p, xl, xu = self._split(x)
        s = self.spec
        t, mu = s.step_hours, s.loss_coefficient
        energy_low = s.e0 - t * np.cumsum(p + mu * losses_low)
        energy_high = s.e0 - t * np.cumsum(p + mu * losses_high)
        delta_min = -t * (1.0 + mu) * np.cumsum(xu)
        delta_max = -t * (1.0 - mu) * np.cumsum(xl)
        return np.concatenate([
            s.e_min - (energy_low + delta_min),
            energy_high + delta_max - s.e_max,
            s.p_min - (p + xl),
            p + xu - s.p_max,
        ])

    def constraints(self, x: ArrayLike) -> NDArray[np.float64]:
        """
        Inequality constraints ``g(x) <= 0``, four blocks of K.

        Blocks: lower energy envelope, upper energy envelope, lower power,
        upper power. Energies are the states after each step, with the exact
        ``|p_B|`` losses.
        """
        p = self._split(x)[0]
        return self._constraint_blocks(x, np.abs(p), np.abs(p))

    def smoothed_constraints(self, x: ArrayLike) -> NDArray[np.float64]:
        """
        Constraints seen by the solver, differentiable in ``p_B``.

        The lower energy limit charges ``smooth_abs_over(p_B) >= |p_B|`` as
        losses and the upper limit ``smooth_abs_under(p_B) <= |p_B|``, so
        ``smoothed_constraints(x) >= constraints(x)`` componentwise.
        """
        p = self._split(x)[0]
        return self._constraint_blocks(x, smooth_abs_over(p)[0], smooth_abs_under(p)[0])

    def constraint_jacobian(self, x: ArrayLike) -> NDArray[np.float64]:
        """Dense Jacobian of :meth:`smoothed_constraints`."""
        p, _, _ = self._split(x)
        K, L = self.horizon, self._cumulative
        t, mu = self.spec.step_hours, self.spec.loss_coefficient
        d_energy_low = -t * L * (1.0 + mu * smooth_abs_over(p)[1])[None, :]
        d_energy_high = -t * L * (1.0 + mu * smooth_abs_under(p)[1])[None, :]
        eye, zero = np.eye(K), np.zeros((K, K))
        return np.block([
            [-d_energy_low, zero, t * (1.0 + mu) * L],
            [d_energy_high, -t * (1.0 - mu) * L, zero],
            [-eye, -eye, zero],
            [eye, zero, eye],
        ])

    def warm_start(self) -> NDArray[np.float64]:
        lower, upper = self.box
        p0 = self.model.expected if self.fixed_battery_power is None else self.fixed_battery_power
        x0 = np.concatenate([p0, np.zeros(self.horizon), np.zeros(self.horizon)])
        return np.clip(x0, lower, upper)

    def assemble(self, v: DecisionVector | ArrayLike, multipliers: ArrayLike | None = None,
                 **status: object) -> ScheduleSolution:
        """
        Derive every reported quantity from a decision vector.

        Args:
            v: Decision vector (any point, not necessarily optimal)
            multipliers: Constraint multipliers, zeros when omitted
            status: ``converged``, ``iterations`` and ``message`` flags

        Returns:
            ScheduleSolution without KKT diagnostics
        """
        x = v.as_array() if isinstance(v, DecisionVector) else np.asarray(v, dtype=float)
        p, xl, xu = self._split(x)
        F, b = self.model.centered, AllocationBounds(xl, xu)
        p1, p2, neg, pos = self.deviation_terms(xl, xu)
        battery_dev = np.asarray(expected_battery_dev(F, b, self.quadrature))
        down, up = (np.asarray(c) for c in conditional_grid_expectations(F, b, self.quadrature))
        grid = build_grid_dev(F, b)
        multipliers = np.zeros(4 * self.horizon) if multipliers is None else np.asarray(multipliers, dtype=float)
        return ScheduleSolution(
            decision=DecisionVector(p, xl, xu),
            expected_prosumption=np.asarray(self.model.expected, dtype=float),
            deviation_cdf=F,
            trajectory=simulate_trajectory(p, xl, xu, battery_dev, self.spec),
            p1=p1, p2=p2,
            exp_grid_dev_neg=neg, exp_grid_dev_pos=pos, exp_battery_dev=battery_dev,
            cond_grid_dev_down=down, cond_grid_dev_up=up,
            grid_dev_q05=np.asarray(grid_dev_quantile(grid, 0.05)),
            grid_dev_q95=np.asarray(grid_dev_quantile(grid, 0.95)),
            objective=self.objective(x),
            multipliers=multipliers,
            **status,
        )


def build_problem(model: ProsumptionModel, spec: BatterySpec, w: CostWeights,
                  qc: QuadratureConfig = QuadratureConfig(), pairing: str = "default",
                  fixed_battery_power: ArrayLike | None = None) -> SchedulingProblem:
    """
    Assemble a scheduling problem.

    Raises:
        ProblemDefinitionError: On horizon, step-duration or pairing mismatches
    """
    K = model.horizon
    if w.horizon != K:
        raise ProblemDefinitionError(f"cost weights cover {w.horizon} steps, the forecast {K}")
    if not np.isclose(model.step_hours, spec.step_hours):
        raise ProblemDefinitionError(
            f"forecast step ({model.step_hours} h) differs from battery step ({spec.step_hours} h)"
        )
    if pairing not in PAIRING_MODES:
        raise ProblemDefinitionError(f"pairing must be one of {PAIRING_MODES}, got {pairing}")
    fixed = None
    if fixed_battery_power is not None:
        fixed = np.asarray(fixed_battery_power, dtype=float)
        if fixed.shape != (K,):
            raise ProblemDefinitionError(f"fixed battery power needs {K} entries, got {fixed.size}")
    return SchedulingProblem(model, spec, w, qc, pairing, fixed)


def objective_eval(v: DecisionVector | ArrayLike, problem: SchedulingProblem) -> float:
    x = v.as_array() if isinstance(v, DecisionVector) else v
    return problem.objective(x)


def objective_grad(v: DecisionVector | ArrayLike, problem: SchedulingProblem) -> NDArray[np.float64]:
    x = v.as_array() if isinstance(v, DecisionVector) else v
    return problem.gradient(x)


def _projected_gradient(x: NDArray[np.float64], grad: NDArray[np.float64],
                        box: tuple[NDArray[np.float64], NDArray[np.float64]]) -> NDArray[np.float64]:
    return x - np.clip(x - grad, *box)


def kkt_residuals(sol: ScheduleSolution, problem: SchedulingProblem) -> KktDiagnostics:
    """
    Stationarity, feasibility and complementarity of a schedule.

    Stationarity is the infinity norm of the projected Lagrangian gradient
    of the smoothed constraints, using the multipliers stored on the
    solution. Violations are measured on the exact constraints.
    """
    x = sol.decision.as_array()
    g = problem.smoothed_constraints(x)
    lam = sol.multipliers
    grad = problem.gradient(x) + problem.constraint_jacobian(x).T @ lam
    violation = np.maximum(problem.constraints(x), 0.0)
    return KktDiagnostics(
        stationarity=float(np.max(np.abs(_projected_gradient(x, grad, problem.box)))),
        max_violation=float(np.max(violation)),
        max_complementarity=float(np.max(np.abs(lam * g))),
        split_complementarity=float(max(np.max(np.abs(sol.p_grid_pos * sol.p_grid_neg)),
                                        np.max(np.abs(sol.p_battery_pos * sol.p_battery_neg)))),
        step_violation=violation.reshape(4, problem.horizon).max(axis=0),
    )


def _minimize_auglag(problem: SchedulingProblem, x0: NDArray[np.float64], cfg: SolverConfig,
                     box: tuple[NDArray[np.float64], NDArray[np.float64]]) -> OptimizeResult:
    """
    Augmented-Lagrangian loop for ``min f(x)`` s.t. ``g(x) <= 0`` over a box.

    Uses the shifted-penalty form
    ``f + (1 / 2ρ) Σ (max(0, λ + ρ g)² - λ²)``; after each inner solve the
    multipliers become ``max(0, λ + ρ g)`` clipped to ``cfg.max_multiplier``
    and ``ρ`` grows (up to ``cfg.max_penalty``) when the violation did not
    shrink by a factor of four. ``history`` holds the augmented value at the
    start and end of every inner solve.
    """
    x = x0.copy()
    lam = np.zeros(4 * problem.horizon)
    penalty = cfg.initial_penalty
    previous_violation = np.inf
    history = []
    converged = False
    iterations = 0

    def lagfun(z: NDArray[np.float64]) -> tuple[float, NDArray[np.float64]]:
        f, df = problem.objective_and_gradient(z, cfg.gradient_mode)
        shifted = np.maximum(0.0, lam + penalty * problem.smoothed_constraints(z))
        value = f + (np.dot(shifted, shifted) - np.dot(lam, lam)) / (2.0 * penalty)
        return value, df + problem.constraint_jacobian(z).T @ shifted

    for iterations in range(1, cfg.max_outer_iterations + 1):
        scale = max(1.0, abs(problem.objective(x)))
        start_value = lagfun(x)[0]
        inner = minimize(
            lagfun, x, jac=True, method="L-BFGS-B", bounds=list(zip(*box)),
            options={"maxiter": cfg.max_inner_iterations, "gtol": 0.1 * cfg.inner_tolerance * scale,
                     "ftol": 1e-15, "maxcor": 20, "maxls": 50},
        )
        if inner.fun <= start_value:
            x = np.clip(inner.x, *box)
        history.append((float(start_value), float(min(inner.fun, start_value))))

        g = problem.smoothed_constraints(x)
        lam = np.clip(lam + penalty * g, 0.0, cfg.max_multiplier)
        violation = float(np.max(np.maximum(g, 0.0)))
        f = problem.objective(x)
        grad = problem.gradient(x) + problem.constraint_jacobian(x).T @ lam
        stationarity = float(np.max(np.abs(_projected_gradient(x, grad, box))))
        logger.debug("outer %d: f=%.8g violation=%.3g stationarity=%.3g penalty=%.3g (%s)",
                     iterations, f, violation, stationarity, penalty, inner.message)

        if violation <= cfg.constraint_tolerance and stationarity <= cfg.inner_tolerance * max(1.0, abs(f)):
            converged = True
            break
        if violation > 0.25 * previous_violation:
            penalty = min(penalty * cfg.penalty_growth, cfg.max_penalty)
        previous_violation = violation

    message = "converged" if converged else "iteration cap reached"
    return OptimizeResult(x=x, fun=problem.objective(x), multipliers=lam, violation=violation,
                          success=converged, nit=iterations, message=message, history=history)


def _check_spec(problem: SchedulingProblem) -> None:
    s = problem.spec
    if not s.e_min <= s.e0 <= s.e_max:
        raise InfeasibleSpecError(f"initial energy {s.e0} kWh lies outside [{s.e_min}, {s.e_max}]")
    fixed = problem.fixed_battery_power
    if fixed is not None:
        if np.any(fixed < s.p_min) or np.any(fixed > s.p_max):
            raise InfeasibleSpecError("fixed battery power exceeds the power limits")
        x = np.concatenate([fixed, np.zeros(2 * problem.horizon)])
        if np.any(problem.constraints(x) > FEASIBILITY_TOL):
            raise InfeasibleSpecError("fixed battery power violates the energy limits")


def _perturbed_start(problem: SchedulingProblem, x0: NDArray[np.float64], rng: np.random.Generator) -> NDArray[np.float64]:
    lower, upper = problem.box
    spread = 0.1 * (problem.spec.p_max - problem.spec.p_min)
    return np.clip(x0 + rng.normal(0.0, spread, size=x0.size), lower, upper)


def solve(problem: SchedulingProblem, cfg: SolverConfig = SolverConfig()) -> ScheduleSolution:
    """
    Solve the scheduling problem.

    The warm start clips the expected prosumption to the power limits and
    first solves with the allocation bounds pinned at zero; the full problem
    starts from that schedule. ``cfg.restarts`` perturbed starts follow and
    the best feasible result wins.

    Args:
        problem: Problem from :func:`build_problem`
        cfg: Solver settings

    Returns:
        ScheduleSolution with KKT diagnostics; ``converged`` is False when
        the iteration cap was hit

    Raises:
        InfeasibleSpecError: If the battery spec cannot be satisfied at all
    """
    _check_spec(problem)
    started = time.perf_counter()
    box = problem.box
    x0 = problem.warm_start()

    if not problem.allocation_fixed:
        core_box = (box[0].copy(), box[1].copy())
        core_box[0][problem.horizon:] = 0.0
        core_box[1][problem.horizon:] = 0.0
        core = _minimize_auglag(problem, x0, cfg, core_box)
        x0 = core.x
        logger.info("Deterministic core: f=%.6g (%s)", core.fun, core.message)

    starts = [x0]
    rng = np.random.default_rng(cfg.seed)
    starts.extend(_perturbed_start(problem, x0, rng) for _ in range(cfg.restarts))

    best = None
    total_iterations = 0
    for i, start in enumerate(starts):
        result = _minimize_auglag(problem, start, cfg, box)
        total_iterations += result.nit
        logger.info("Start %d: f=%.8g violation=%.3g after %d outer iterations (%s)",
                    i, result.fun, result.violation, result.nit, result.message)
        key = (not result.success, result.violation > cfg.constraint_tolerance, result.fun)
        if best is None or key < best[0]:
            best = (key, result)

    result = best[1]
    sol = problem.assemble(result.x, result.multipliers, converged=bool(result.success),
                           iterations=total_iterations, message=result.message,
                           history=tuple(result.history))
    sol = replace(sol, kkt=kkt_residuals(sol, problem))
    elapsed = time.perf_counter() - started
    if sol.converged:
        logger.info("Solved %d-step schedule in %.2f s, objective %.6g", problem.horizon, elapsed, sol.objective)
    else:
        logger.warning("Solver did not converge (%s); returning best iterate", result.message)
    return sol


def solution_records(sol: ScheduleSolution, hour_labels: list[str] | None = None) -> list[dict]:
    """Per-step records of every reported quantity (states after the step)."""
    traj = sol.trajectory
    records = []
    for k in range(sol.horizon):
        record = {
            "step": k,
            "p_l_expected": sol.expected_prosumption[k],
            "p_b": sol.decision.p_battery[k],
            "x_lower": sol.decision.x_lower[k],
            "x_upper": sol.decision.x_upper[k],
            "p_g": sol.p_grid[k],
            "p_g_pos": sol.p_grid_pos[k],
            "p_g_neg": sol.p_grid_neg[k],
            "p_b_pos": sol.p_battery_pos[k],
            "p_b_neg": sol.p_battery_neg[k],
            "e": traj.energy[k + 1],
            "delta_e_min": traj.delta_e_min[k + 1],
            "delta_e_max": traj.delta_e_max[k + 1],
            "e_expected": traj.expected_energy[k + 1],
            "p1": sol.p1[k],
            "p2": sol.p2[k],
            "zero_atom_mass": sol.zero_atom_mass[k],
            "exp_grid_dev_neg": sol.exp_grid_dev_neg[k],
            "exp_grid_dev_pos": sol.exp_grid_dev_pos[k],
            "exp_battery_dev": sol.exp_battery_dev[k],
            "cond_grid_dev_down": sol.cond_grid_dev_down[k],
            "cond_grid_dev_up": sol.cond_grid_dev_up[k],
            "grid_dev_q05": sol.grid_dev_q05[k],
            "grid_dev_q95": sol.grid_dev_q95[k],
        }
        record = {key: (float(value) if key != "step" else value) for key, value in record.items()}
        if hour_labels is not None:
            record["hour"] = hour_labels[k]
        records.append(record)
    return records


def write_solution_json(path: Path, sol: ScheduleSolution, metadata: dict | None = None,
                        hour_labels: list[str] | None = None) -> None:
    """Write the solution JSON: run metadata plus one record per step."""
    document = {
        "metadata": {
            **(metadata or {}),
            "converged": sol.converged,
            "message": sol.message,
            "iterations": sol.iterations,
            "objective": sol.objective,
            "initial_energy": float(sol.trajectory.energy[0]),
            "kkt": sol.kkt.as_dict() if sol.kkt is not None else None,
        },
        "steps": solution_records(sol, hour_labels),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(document, f, indent=2)


def read_solution_steps(path: Path) -> pd.DataFrame:
    """Per-step records of a solution JSON as a frame indexed by step."""
    with open(path, "r") as f:
        document = json.load(f)
    return pd.DataFrame(document["steps"]).set_index("step")


def load_decision_vector(path: Path) -> DecisionVector:
    steps = read_solution_steps(path)
    return DecisionVector(steps["p_b"].to_numpy(float), steps["x_lower"].to_numpy(float),
                          steps["x_upper"].to_numpy(float))


def plot_frame(sol: ScheduleSolution) -> pd.DataFrame:
    """
    Plot data: nominal grid power with absolute 5%/95% grid-power quantiles,
    deviation probabilities, conditional deviation expectations and battery
    states after each step.
    """
    traj = sol.trajectory
    return pd.DataFrame({
        "step": np.arange(sol.horizon),
        "p_g_nominal": sol.p_grid,
        "q05": sol.p_grid + sol.grid_dev_q05,
        "q95": sol.p_grid + sol.grid_dev_q95,
        "prob_up": sol.p2,
        "prob_down": sol.p1,
        "exp_up": sol.cond_grid_dev_up,
        "exp_down": sol.cond_grid_dev_down,
        "e_nominal": traj.energy[1:],
        "e_min_env": traj.lower_envelope[1:],
        "e_max_env": traj.upper_envelope[1:],
        "e_expected": traj.expected_energy[1:],
    }, columns=PLOT_COLUMNS)


def write_plot_csv(path: Path, sol: ScheduleSolution) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    plot_frame(sol).to_csv(path, index=False, float_format="%.17g")
