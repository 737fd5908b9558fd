"""Mixed random-variable mathematics for splitting prosumption deviations.

A prosumption deviation ``ΔP_L`` with a double-logistic CDF is clamped to the
allocation interval ``[x_lower, x_upper]``. The clamped part goes to the
battery (two atoms plus a truncated core) and the remainder goes to the grid
(a zero atom plus two shifted tails). Every function here accepts either a
scalar distribution or one whose weights are equal-length arrays (one entry
per time step) and broadcasts accordingly.
"""

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit

from constants import DEFAULT_NODE_COUNT, DEFAULT_TAIL_CUTOFF, EXPONENT_CLAMP

logger = logging.getLogger(__name__)

FloatOrArray = float | NDArray[np.float64]

_QUANTILE_MAX_ITERATIONS = 100
_QUANTILE_TOL = 1e-14


@dataclass(frozen=True)
class DoubleLogisticCdf:
    """Sum of two scaled logistic CDFs.

    ``F(z) = w1 / (1 + exp(-w2 (z - w3))) + w4 / (1 + exp(-w5 (z - w6)))``

    Attributes:
        w1, w4: Mixture masses, non-negative and summing to one
        w2, w5: Inverse scales in 1/kW, strictly positive
        w3, w6: Locations in kW
    """

    w1: FloatOrArray
    w2: FloatOrArray
    w3: FloatOrArray
    w4: FloatOrArray
    w5: FloatOrArray
    w6: FloatOrArray

    def __post_init__(self) -> None:
        w1, w2, w4, w5 = (np.asarray(w, dtype=float) for w in (self.w1, self.w2, self.w4, self.w5))
        if np.any(w1 < 0) or np.any(w4 < 0):
            raise ValueError("Mixture masses w1 and w4 must be non-negative")
        if np.any(np.abs(w1 + w4 - 1.0) > 1e-9):
            raise ValueError("Mixture masses w1 + w4 must equal 1")
        if np.any(w2 <= 0) or np.any(w5 <= 0):
            raise ValueError("Inverse scales w2 and w5 must be strictly positive")

    @property
    def mean(self) -> FloatOrArray:
        """Expected value ``w1 w3 + w4 w6`` (each logistic has its location as mean)."""
        return self.w1 * self.w3 + self.w4 * self.w6

    @property
    def params(self) -> tuple[FloatOrArray, ...]:
        return (self.w1, self.w2, self.w3, self.w4, self.w5, self.w6)

    @property
    def size(self) -> int:
        """Number of stacked steps (1 for a scalar distribution)."""
        return int(np.size(self.w1))

    def shifted(self, delta: ArrayLike) -> "DoubleLogisticCdf":
        """Return the distribution of ``Z + delta``."""
        return DoubleLogisticCdf(self.w1, self.w2, self.w3 + delta, self.w4, self.w5, self.w6 + delta)

    def step(self, k: int) -> "DoubleLogisticCdf":
        """Extract the scalar distribution of step ``k`` from a stacked one."""
        return DoubleLogisticCdf(*(float(np.asarray(w)[k]) for w in self.params))

    def select(self, mask: ArrayLike) -> "DoubleLogisticCdf":
        """Keep the stacked entries where ``mask`` is true."""
        return DoubleLogisticCdf(*(np.asarray(w)[mask] for w in self.params))

    @classmethod
    def stack(cls, cdfs: "list[DoubleLogisticCdf]") -> "DoubleLogisticCdf":
        """Stack scalar distributions into one vectorized distribution."""
        columns = zip(*(c.params for c in cdfs))
        return cls(*(np.array(col, dtype=float) for col in columns))


@dataclass(frozen=True)
class AllocationBounds:
    """Per-step interval of prosumption deviation absorbed by the battery."""

    x_lower: FloatOrArray
    x_upper: FloatOrArray

    def __post_init__(self) -> None:
        if np.any(np.asarray(self.x_lower) > 0) or np.any(np.asarray(self.x_upper) < 0):
            raise ValueError("Allocation bounds must satisfy x_lower <= 0 <= x_upper")

    def step(self, k: int) -> "AllocationBounds":
        return AllocationBounds(float(np.asarray(self.x_lower)[k]), float(np.asarray(self.x_upper)[k]))


@dataclass(frozen=True)
class QuadratureConfig:
    """Discretization of the expectation integrals.

    Attributes:
        node_count: Simpson panel count per logistic component and integral (even, >= 2)
        tail_cutoff_prob: Probability mass left outside the integrated body
    """

    node_count: int = DEFAULT_NODE_COUNT
    tail_cutoff_prob: float = DEFAULT_TAIL_CUTOFF

    def __post_init__(self) -> None:
        if self.node_count < 2 or self.node_count % 2:
            raise ValueError(f"node_count must be an even integer >= 2, got {self.node_count}")
        if not 0.0 < self.tail_cutoff_prob < 1e-2:
            raise ValueError(f"tail_cutoff_prob must lie in (0, 0.01), got {self.tail_cutoff_prob}")


def _scalarize(x: NDArray[np.float64]) -> FloatOrArray:
    return float(x) if np.ndim(x) == 0 else x


def _arguments(F: DoubleLogisticCdf, z: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    z = np.asarray(z, dtype=float)
    u1 = np.clip(F.w2 * (z - F.w3), -EXPONENT_CLAMP, EXPONENT_CLAMP)
    u2 = np.clip(F.w5 * (z - F.w6), -EXPONENT_CLAMP, EXPONENT_CLAMP)
    return u1, u2


def cdf_eval(F: DoubleLogisticCdf, z: ArrayLike) -> FloatOrArray:
    """Evaluate the CDF; saturates to 0/1 instead of overflowing."""
    u1, u2 = _arguments(F, z)
    return _scalarize(F.w1 * expit(u1) + F.w4 * expit(u2))


def sf_eval(F: DoubleLogisticCdf, z: ArrayLike) -> FloatOrArray:
    """Survival function ``1 - F(z)`` evaluated without cancellation."""
    u1, u2 = _arguments(F, z)
    return _scalarize(F.w1 * expit(-u1) + F.w4 * expit(-u2))


def pdf_eval(F: DoubleLogisticCdf, z: ArrayLike) -> FloatOrArray:
    """Evaluate the density, the analytic derivative of :func:`cdf_eval`."""
    u1, u2 = _arguments(F, z)
    d1 = F.w2 * expit(u1) * expit(-u1)
    d2 = F.w5 * expit(u2) * expit(-u2)
    return _scalarize(F.w1 * d1 + F.w4 * d2)


def quantile(F: DoubleLogisticCdf, q: ArrayLike, guess: ArrayLike | None = None) -> FloatOrArray:
    """
    Invert the CDF by safeguarded Newton iteration.

    The root is bracketed by the component quantiles: at the smaller one
    every component CDF is at most ``q``, at the larger one at least ``q``.
    Newton steps that leave the bracket fall back to bisection. Only the
    entries that have not converged are iterated.

    Args:
        F: Distribution (scalar or stacked; broadcasts against ``q``)
        q: Probabilities in (0, 1)
        guess: Optional starting points, clipped into the bracket

    Returns:
        z with ``cdf_eval(F, z) == q`` to within 1e-13
    """
    q = np.asarray(q, dtype=float)
    if np.any((q <= 0) | (q >= 1)):
        raise ValueError("quantile levels must lie strictly inside (0, 1)")

    arrays = np.broadcast_arrays(q, *(np.asarray(w, dtype=float) for w in F.params))
    shape = arrays[0].shape
    q, w1, w2, w3, w4, w5, w6 = (a.ravel() for a in arrays)

    logit_q = np.log(q) - np.log1p(-q)
    c1 = w3 + logit_q / w2
    c2 = w6 + logit_q / w5
    lo = np.minimum(c1, c2)
    hi = np.maximum(c1, c2)
    if guess is None:
        x = 0.5 * (lo + hi)
    else:
        x = np.clip(np.broadcast_to(np.asarray(guess, dtype=float), shape).ravel(), lo, hi)

    active = np.arange(q.size)
    for _ in range(_QUANTILE_MAX_ITERATIONS):
        Fa = DoubleLogisticCdf(w1[active], w2[active], w3[active], w4[active], w5[active], w6[active])
        xa = x[active]
        resid = np.asarray(cdf_eval(Fa, xa)) - q[active]
        lo_a = np.where(resid <= 0, xa, lo[active])
        hi_a = np.where(resid >= 0, xa, hi[active])
        lo[active], hi[active] = lo_a, hi_a
        done = (np.abs(resid) <= _QUANTILE_TOL) | (hi_a - lo_a <= 4 * np.finfo(float).eps * (1 + np.abs(xa)))
        keep = ~done
        if not np.any(keep):
            break
        active, xa, resid, lo_a, hi_a = active[keep], xa[keep], resid[keep], lo_a[keep], hi_a[keep]
        dens = np.asarray(pdf_eval(Fa.select(keep), xa))
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = xa - resid / dens
        inside = np.isfinite(newton) & (newton > lo_a) & (newton < hi_a)
        x[active] = np.where(inside, newton, 0.5 * (lo_a + hi_a))

    return _scalarize(x.reshape(shape))


def simpson_integrate(g: Callable[[NDArray[np.float64]], NDArray[np.float64]], a: ArrayLike, b: ArrayLike,
                      n: int) -> FloatOrArray:
    """
    Composite Simpson 1/3 rule on ``n`` equal panels.

    ``a`` and ``b`` may be arrays; ``g`` is then called once with a node grid
    of shape ``a.shape + (n + 1,)``.

    Raises:
        ValueError: If ``n`` is odd or smaller than 2, or ``b < a``
    """
    if n < 2 or n % 2:
        raise ValueError(f"Simpson's rule needs an even panel count >= 2, got {n}")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(b < a):
        raise ValueError("Simpson integration requires a <= b")

    h = (b - a) / n
    nodes = a[..., None] + h[..., None] * np.arange(n + 1)
    weights = np.ones(n + 1)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    return _scalarize(h * (np.asarray(g(nodes)) @ weights) / 3.0)


def _softplus(u: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.logaddexp(0.0, u)


def _logistic_argument(scale: ArrayLike, loc: ArrayLike, x: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Clamped ``scale (x - loc)`` and the point it corresponds to (finite for x = ±inf)."""
    u = np.clip(np.asarray(scale) * (np.asarray(x, dtype=float) - loc), -EXPONENT_CLAMP, EXPONENT_CLAMP)
    return u, loc + u / scale


def _logistic_lower_mean(scale: ArrayLike, loc: ArrayLike, x: ArrayLike) -> NDArray[np.float64]:
    u, x_eff = _logistic_argument(scale, loc, x)
    return x_eff * expit(u) - _softplus(u) / scale


def _logistic_upper_mean(scale: ArrayLike, loc: ArrayLike, x: ArrayLike) -> NDArray[np.float64]:
    u, x_eff = _logistic_argument(scale, loc, x)
    return x_eff * expit(-u) + _softplus(-u) / scale


def lower_partial_mean(F: DoubleLogisticCdf, a: ArrayLike) -> FloatOrArray:
    """Closed form of ``∫_{-∞}^{a} y f(y) dy`` (integration by parts per component)."""
    return _scalarize(F.w1 * _logistic_lower_mean(F.w2, F.w3, a) + F.w4 * _logistic_lower_mean(F.w5, F.w6, a))


def upper_partial_mean(F: DoubleLogisticCdf, a: ArrayLike) -> FloatOrArray:
    """Closed form of ``∫_{a}^{∞} y f(y) dy``."""
    return _scalarize(F.w1 * _logistic_upper_mean(F.w2, F.w3, a) + F.w4 * _logistic_upper_mean(F.w5, F.w6, a))


def _shifted_moment(F: DoubleLogisticCdf, a: ArrayLike, b: ArrayLike, shift: ArrayLike,
                    qc: QuadratureConfig) -> NDArray[np.float64]:
    """
    ``∫_a^b (y - shift) f(y) dy`` for ``a <= b`` (either may be infinite).

    Each logistic component is integrated on its own: Simpson's rule covers
    the part of ``[a, b]`` inside the component's tail cutoffs, so the panel
    width follows that component's scale, and the pieces outside are added
    in closed form.
    """
    cutoff_logit = np.log(qc.tail_cutoff_prob) - np.log1p(-qc.tail_cutoff_prob)
    total = np.zeros(())
    for weight, scale, loc in ((F.w1, F.w2, F.w3), (F.w4, F.w5, F.w6)):
        scale, loc, lo_x, hi_x, s = np.broadcast_arrays(
            *(np.asarray(v, dtype=float) for v in (scale, loc, a, b, shift)))
        lo = loc + cutoff_logit / scale
        hi = loc - cutoff_logit / scale
        a_in = np.clip(lo_x, lo, hi)
        b_in = np.clip(hi_x, lo, hi)

        def moment(x_from: NDArray[np.float64], x_to: NDArray[np.float64]) -> NDArray[np.float64]:
            mean = _logistic_lower_mean(scale, loc, x_to) - _logistic_lower_mean(scale, loc, x_from)
            mass = expit(_logistic_argument(scale, loc, x_to)[0]) - expit(_logistic_argument(scale, loc, x_from)[0])
            return mean - s * mass

        def integrand(y: NDArray[np.float64]) -> NDArray[np.float64]:
            u = np.clip(scale[..., None] * (y - loc[..., None]), -EXPONENT_CLAMP, EXPONENT_CLAMP)
            return (y - s[..., None]) * scale[..., None] * expit(u) * expit(-u)

        body = np.asarray(simpson_integrate(integrand, a_in, b_in, qc.node_count))
        total = total + weight * (body + moment(lo_x, a_in) + moment(b_in, hi_x))
    return total


def atom_probs(F_dev: DoubleLogisticCdf, b: AllocationBounds) -> tuple[FloatOrArray, FloatOrArray]:
    """Return ``(p1, p2)``: masses of the battery deviation at ``x_lower`` and ``x_upper``."""
    return cdf_eval(F_dev, b.x_lower), sf_eval(F_dev, b.x_upper)


def expected_battery_dev(F_dev: DoubleLogisticCdf, b: AllocationBounds,
                         qc: QuadratureConfig = QuadratureConfig()) -> FloatOrArray:
    """Expected battery deviation ``p1 x_lower + ∫ z f(z) dz + p2 x_upper``."""
    xl = np.asarray(b.x_lower, dtype=float)
    xu = np.asarray(b.x_upper, dtype=float)
    p1, p2 = atom_probs(F_dev, b)
    return _scalarize(p1 * xl + p2 * xu + _shifted_moment(F_dev, xl, xu, 0.0, qc))


def expected_grid_dev_neg(F_dev: DoubleLogisticCdf, b: AllocationBounds,
                          qc: QuadratureConfig = QuadratureConfig()) -> FloatOrArray:
    """Downward grid deviation ``∫_{-∞}^{0} z f(z + x_lower) dz`` (always <= 0)."""
    xl = np.asarray(b.x_lower, dtype=float)
    return _scalarize(np.minimum(_shifted_moment(F_dev, -np.inf, xl, xl, qc), 0.0))


def expected_grid_dev_pos(F_dev: DoubleLogisticCdf, b: AllocationBounds,
                          qc: QuadratureConfig = QuadratureConfig()) -> FloatOrArray:
    """Upward grid deviation ``∫_{0}^{∞} z f(z + x_upper) dz`` (always >= 0)."""
    xu = np.asarray(b.x_upper, dtype=float)
    return _scalarize(np.maximum(_shifted_moment(F_dev, xu, np.inf, xu, qc), 0.0))


def expectation_sum_residual(F_dev: DoubleLogisticCdf, b: AllocationBounds,
                             qc: QuadratureConfig = QuadratureConfig()) -> FloatOrArray:
    """``E[ΔP_{L→B}] + E[ΔP_{L→G}]``, zero for a centered deviation."""
    return _scalarize(
        np.asarray(expected_battery_dev(F_dev, b, qc))
        + expected_grid_dev_neg(F_dev, b, qc)
        + expected_grid_dev_pos(F_dev, b, qc)
    )


def conditional_grid_expectations(F_dev: DoubleLogisticCdf, b: AllocationBounds,
                                  qc: QuadratureConfig = QuadratureConfig()
                                  ) -> tuple[FloatOrArray, FloatOrArray]:
    """
    Expected downward/upward grid deviation given that it occurs.

    Returns:
        ``(E[ΔP_G^{<0}] / p1, E[ΔP_G^{>0}] / p2)``, 0 where the probability is 0
    """
    p1, p2 = (np.asarray(p) for p in atom_probs(F_dev, b))
    neg = np.asarray(expected_grid_dev_neg(F_dev, b, qc))
    pos = np.asarray(expected_grid_dev_pos(F_dev, b, qc))
    down = np.divide(neg, p1, out=np.zeros_like(neg), where=p1 > 0)
    up = np.divide(pos, p2, out=np.zeros_like(pos), where=p2 > 0)
    return _scalarize(down), _scalarize(up)


@dataclass(frozen=True)
class MixedBatteryDeviation:
    """Battery share of the deviation: atoms at both bounds plus a truncated core."""

    F_dev: DoubleLogisticCdf
    bounds: AllocationBounds
    p1: FloatOrArray
    p2: FloatOrArray
    core_mass: FloatOrArray

    @property
    def total_mass(self) -> FloatOrArray:
        return self.p1 + self.p2 + self.core_mass

    def core_density(self, z: ArrayLike) -> FloatOrArray:
        z = np.asarray(z, dtype=float)
        inside = (z > self.bounds.x_lower) & (z < self.bounds.x_upper)
        return _scalarize(np.where(inside, pdf_eval(self.F_dev, z), 0.0))

    def cdf(self, z: ArrayLike) -> FloatOrArray:
        z = np.asarray(z, dtype=float)
        xl, xu = self.bounds.x_lower, self.bounds.x_upper
        core = np.asarray(cdf_eval(self.F_dev, np.clip(z, xl, xu))) - cdf_eval(self.F_dev, xl)
        value = np.where(z < xl, 0.0, np.where(z >= xu, 1.0, self.p1 + core))
        return _scalarize(value)


@dataclass(frozen=True)
class MixedGridDeviation:
    """Grid share of the deviation: a zero atom plus the two shifted tails."""

    F_dev: DoubleLogisticCdf
    bounds: AllocationBounds
    p1: FloatOrArray
    p2: FloatOrArray
    atom_mass: FloatOrArray

    @property
    def total_mass(self) -> FloatOrArray:
        return self.p1 + self.p2 + self.atom_mass

    def tail_density(self, z: ArrayLike) -> FloatOrArray:
        z = np.asarray(z, dtype=float)
        left = np.asarray(pdf_eval(self.F_dev, z + self.bounds.x_lower))
        right = np.asarray(pdf_eval(self.F_dev, z + self.bounds.x_upper))
        return _scalarize(np.where(z < 0, left, np.where(z > 0, right, 0.0)))

    def cdf(self, z: ArrayLike) -> FloatOrArray:
        z = np.asarray(z, dtype=float)
        left = np.asarray(cdf_eval(self.F_dev, z + self.bounds.x_lower))
        right = np.asarray(cdf_eval(self.F_dev, z + self.bounds.x_upper))
        return _scalarize(np.where(z < 0, left, right))


def build_battery_dev(F_dev: DoubleLogisticCdf, b: AllocationBounds) -> MixedBatteryDeviation:
    p1, p2 = atom_probs(F_dev, b)
    core = np.asarray(cdf_eval(F_dev, b.x_upper)) - cdf_eval(F_dev, b.x_lower)
    return MixedBatteryDeviation(F_dev, b, p1, p2, _scalarize(np.maximum(core, 0.0)))


def build_grid_dev(F_dev: DoubleLogisticCdf, b: AllocationBounds) -> MixedGridDeviation:
    p1, p2 = atom_probs(F_dev, b)
    atom = np.asarray(cdf_eval(F_dev, b.x_upper)) - cdf_eval(F_dev, b.x_lower)
    return MixedGridDeviation(F_dev, b, p1, p2, _scalarize(np.maximum(atom, 0.0)))


def grid_dev_quantile(g: MixedGridDeviation, q: ArrayLike) -> FloatOrArray:
    """
    Generalized inverse of the mixed grid-deviation CDF.

    Levels inside the atom's span ``[p1, p1 + atom_mass]`` map to 0; below it
    the left tail ``Q(q) - x_lower`` applies, above it ``Q(q) - x_upper``.
    """
    q = np.asarray(q, dtype=float)
    p1 = np.asarray(g.p1)
    upper_edge = p1 + g.atom_mass
    z = np.asarray(quantile(g.F_dev, q))
    value = np.where(q < p1, z - g.bounds.x_lower, np.where(q <= upper_edge, 0.0, z - g.bounds.x_upper))
    return _scalarize(value)
