"""Tests for the double-logistic distribution and the mixed deviation split."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad

from conftest import random_cdf
from mixed_rv import (
    AllocationBounds,
    DoubleLogisticCdf,
    QuadratureConfig,
    atom_probs,
    build_battery_dev,
    build_grid_dev,
    cdf_eval,
    conditional_grid_expectations,
    expectation_sum_residual,
    expected_battery_dev,
    expected_grid_dev_neg,
    expected_grid_dev_pos,
    grid_dev_quantile,
    lower_partial_mean,
    pdf_eval,
    quantile,
    sf_eval,
    simpson_integrate,
    upper_partial_mean,
)


def _tail_cutoffs(F, mass):
    return quantile(F, mass), quantile(F, 1.0 - mass)


class TestDoubleLogisticCdf:

    def test_known_value(self, symmetric_cdf):
        assert_allclose(cdf_eval(symmetric_cdf, -0.5), 0.38924, atol=1e-5)

    def test_symmetric_median(self, symmetric_cdf):
        assert_allclose(cdf_eval(symmetric_cdf, 0.0), 0.5, atol=1e-15)
        assert_allclose(quantile(symmetric_cdf, 0.5), 0.0, atol=1e-12)

    def test_limits_saturate(self, symmetric_cdf):
        with np.errstate(over="raise"):
            assert cdf_eval(symmetric_cdf, -1e6) < 1e-300
            assert cdf_eval(symmetric_cdf, 1e6) == 1.0
            assert sf_eval(symmetric_cdf, 1e6) < 1e-300

    def test_pdf_at_location(self, standard_logistic):
        assert_allclose(pdf_eval(standard_logistic, 0.0), 0.25)

    def test_pdf_symmetry(self, symmetric_cdf):
        z = np.array([0.3, 1.7])
        assert_allclose(pdf_eval(symmetric_cdf, z), pdf_eval(symmetric_cdf, -z), rtol=1e-14)

    def test_pdf_integrates_to_one(self, symmetric_cdf):
        lo, hi = _tail_cutoffs(symmetric_cdf, 1e-9)
        total, _ = quad(lambda z: pdf_eval(symmetric_cdf, z), lo, hi, epsabs=1e-12, limit=200)
        assert_allclose(total, 1.0, atol=1e-6)

    def test_logistic_quantile_closed_form(self, standard_logistic):
        assert_allclose(quantile(standard_logistic, 0.75), np.log(3.0), atol=1e-12)

    def test_quantile_inverts_cdf(self, symmetric_cdf):
        assert_allclose(quantile(symmetric_cdf, cdf_eval(symmetric_cdf, 0.37)), 0.37, atol=1e-8)

    def test_quantile_inverts_cdf_across_band(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            F = random_cdf(rng)
            z = np.linspace(*_tail_cutoffs(F, 1e-3), 200)
            assert_allclose(quantile(F, cdf_eval(F, z)), z, atol=1e-8)

    def test_quantile_guess_only_changes_the_start(self, symmetric_cdf):
        q = np.array([1e-6, 0.2, 0.5, 0.93, 1 - 1e-9])
        far = quantile(symmetric_cdf, q, guess=np.full(q.size, 40.0))
        assert_allclose(far, quantile(symmetric_cdf, q), atol=1e-12)

    def test_quantile_rejects_levels_outside_unit_interval(self, symmetric_cdf):
        with pytest.raises(ValueError):
            quantile(symmetric_cdf, 1.0)

    def test_mean_and_shift(self):
        F = DoubleLogisticCdf(1.0, 1.0, 3.0, 0.0, 1.0, 0.0)
        assert F.mean == 3.0
        assert F.shifted(-3.0).w3 == 0.0

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            DoubleLogisticCdf(0.7, 1.0, 0.0, 0.7, 1.0, 0.0)
        with pytest.raises(ValueError):
            DoubleLogisticCdf(0.5, 0.0, 0.0, 0.5, 1.0, 0.0)

    def test_stacked_evaluation_matches_per_step(self):
        rng = np.random.default_rng(3)
        cdfs = [random_cdf(rng) for _ in range(5)]
        stacked = DoubleLogisticCdf.stack(cdfs)
        z = rng.normal(size=5)
        expected = [cdf_eval(F, zk) for F, zk in zip(cdfs, z)]
        assert_allclose(cdf_eval(stacked, z), expected, rtol=1e-14)
        assert stacked.step(2) == cdfs[2]


class TestSimpson:

    def test_exact_for_cubics(self):
        assert simpson_integrate(lambda z: z**3, 0.0, 1.0, 2) == pytest.approx(0.25, abs=1e-15)

    def test_empty_interval(self):
        assert simpson_integrate(np.exp, 1.0, 1.0, 8) == 0.0

    def test_logistic_density_mass(self, standard_logistic):
        total = simpson_integrate(lambda z: pdf_eval(standard_logistic, z), -12.0, 12.0, 64)
        exact = cdf_eval(standard_logistic, 12.0) - cdf_eval(standard_logistic, -12.0)
        assert_allclose(total, exact, atol=1e-8)

    def test_fourth_order_convergence(self, symmetric_cdf):
        g = lambda z: z * pdf_eval(symmetric_cdf, z)  # noqa: E731
        exact, _ = quad(g, 0.0, 2.0, epsabs=1e-14)
        e1 = abs(simpson_integrate(g, 0.0, 2.0, 16) - exact)
        e2 = abs(simpson_integrate(g, 0.0, 2.0, 32) - exact)
        assert e1 / e2 >= 8.0

    def test_rejects_odd_panels(self):
        with pytest.raises(ValueError):
            simpson_integrate(np.exp, 0.0, 1.0, 3)


class TestPartialMeans:

    def test_sum_is_the_mean(self, symmetric_cdf):
        for a in (-2.0, 0.0, 0.7):
            total = lower_partial_mean(symmetric_cdf, a) + upper_partial_mean(symmetric_cdf, a)
            assert_allclose(total, symmetric_cdf.mean, atol=1e-12)

    def test_against_quad(self, symmetric_cdf):
        ref, _ = quad(lambda z: z * pdf_eval(symmetric_cdf, z), -np.inf, 0.4)
        assert_allclose(lower_partial_mean(symmetric_cdf, 0.4), ref, atol=1e-9)


class TestAtomProbabilities:

    def test_degenerate_interval(self, symmetric_cdf):
        p1, p2 = atom_probs(symmetric_cdf, AllocationBounds(0.0, 0.0))
        assert_allclose([p1, p2], [0.5, 0.5], atol=1e-15)

    def test_known_value(self, symmetric_cdf):
        p1, _ = atom_probs(symmetric_cdf, AllocationBounds(-0.5, 0.5))
        assert_allclose(p1, 0.38924, atol=1e-5)

    def test_full_absorption(self, symmetric_cdf):
        lo, hi = _tail_cutoffs(symmetric_cdf, 1e-8)
        p1, p2 = atom_probs(symmetric_cdf, AllocationBounds(lo, hi))
        assert_allclose([p1, p2], [0.0, 0.0], atol=1e-6)

    def test_rejects_bounds_excluding_zero(self):
        with pytest.raises(ValueError):
            AllocationBounds(0.5, 1.0)


class TestExpectations:

    def test_symmetric_battery_deviation_vanishes(self, symmetric_cdf):
        assert_allclose(expected_battery_dev(symmetric_cdf, AllocationBounds(-1.0, 1.0)), 0.0, atol=1e-12)
        assert_allclose(expected_battery_dev(symmetric_cdf, AllocationBounds(0.0, 0.0)), 0.0, atol=1e-15)

    def test_asymmetric_battery_deviation_matches_quad(self, symmetric_cdf):
        F = symmetric_cdf
        core, _ = quad(lambda z: z * pdf_eval(F, z), 0.0, 1.0, epsabs=1e-14)
        ref = 0.0 * cdf_eval(F, 0.0) + core + 1.0 * sf_eval(F, 1.0)
        value = expected_battery_dev(F, AllocationBounds(0.0, 1.0))
        assert value > 0
        assert_allclose(value, ref, rtol=1e-6)

    def test_standard_logistic_half_integrals(self, standard_logistic):
        b = AllocationBounds(0.0, 0.0)
        assert_allclose(expected_grid_dev_neg(standard_logistic, b), -np.log(2.0), atol=1e-6)
        assert_allclose(expected_grid_dev_pos(standard_logistic, b), np.log(2.0), atol=1e-6)

    def test_absorbed_tails(self, symmetric_cdf):
        lo, hi = _tail_cutoffs(symmetric_cdf, 1e-9)
        b = AllocationBounds(lo - 1.0, hi + 1.0)
        assert_allclose(expected_grid_dev_neg(symmetric_cdf, b), 0.0, atol=1e-6)
        assert_allclose(expected_grid_dev_pos(symmetric_cdf, b), 0.0, atol=1e-6)

    def test_symmetric_grid_deviations_mirror(self, symmetric_cdf):
        b = AllocationBounds(-0.4, 0.4)
        assert_allclose(expected_grid_dev_neg(symmetric_cdf, b), -expected_grid_dev_pos(symmetric_cdf, b),
                        rtol=1e-9)

    def test_grid_deviation_matches_quad(self, symmetric_cdf):
        F, b = symmetric_cdf, AllocationBounds(-0.3, 0.8)
        neg, _ = quad(lambda z: z * pdf_eval(F, z + b.x_lower), -np.inf, 0.0, epsabs=1e-13)
        pos, _ = quad(lambda z: z * pdf_eval(F, z + b.x_upper), 0.0, np.inf, epsabs=1e-13)
        assert_allclose(expected_grid_dev_neg(F, b), neg, rtol=1e-6)
        assert_allclose(expected_grid_dev_pos(F, b), pos, rtol=1e-6)

    def test_sum_identity_random_cases(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            F = random_cdf(rng)
            F = F.shifted(-F.mean)
            b = AllocationBounds(-rng.exponential(1.0), rng.exponential(1.0))
            assert abs(expectation_sum_residual(F, b)) <= 1e-5

    def test_sum_identity_mixed_scales(self):
        F = DoubleLogisticCdf(0.4, 0.52, -1.5, 0.6, 4.1, 0.8)
        F = F.shifted(-F.mean)
        for b in (AllocationBounds(-0.3, 0.2), AllocationBounds(-2.5, 0.05), AllocationBounds(0.0, 3.0)):
            assert abs(expectation_sum_residual(F, b)) <= 1e-5

    def test_mixed_scales_match_quad(self):
        F, b = DoubleLogisticCdf(0.4, 0.52, -1.5, 0.6, 4.1, 0.8), AllocationBounds(-0.6, 0.4)
        neg = sum(quad(lambda z: z * pdf_eval(F, z + b.x_lower), lo, hi, epsabs=1e-14, limit=200)[0]
                  for lo, hi in ((-np.inf, -1.5), (-1.5, 0.0)))
        pos = sum(quad(lambda z: z * pdf_eval(F, z + b.x_upper), lo, hi, epsabs=1e-14, limit=200)[0]
                  for lo, hi in ((0.0, 0.4), (0.4, np.inf)))
        assert_allclose(expected_grid_dev_neg(F, b), neg, rtol=1e-6)
        assert_allclose(expected_grid_dev_pos(F, b), pos, rtol=1e-6)

    def test_mass_conservation_random_cases(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            F = random_cdf(rng)
            b = AllocationBounds(-rng.exponential(1.0), rng.exponential(1.0))
            assert abs(build_battery_dev(F, b).total_mass - 1.0) <= 1e-6

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(5)
        cdfs = [random_cdf(rng) for _ in range(4)]
        xl, xu = -rng.exponential(size=4), rng.exponential(size=4)
        stacked = expected_battery_dev(DoubleLogisticCdf.stack(cdfs), AllocationBounds(xl, xu))
        single = [expected_battery_dev(F, AllocationBounds(a, c)) for F, a, c in zip(cdfs, xl, xu)]
        assert_allclose(stacked, single, rtol=1e-12, atol=1e-14)

    def test_conditional_expectations(self, symmetric_cdf):
        b = AllocationBounds(-0.5, 0.5)
        down, up = conditional_grid_expectations(symmetric_cdf, b)
        p1, p2 = atom_probs(symmetric_cdf, b)
        assert_allclose(down * p1, expected_grid_dev_neg(symmetric_cdf, b), rtol=1e-12)
        assert down < 0 < up

    def test_node_count_must_be_even(self):
        with pytest.raises(ValueError):
            QuadratureConfig(node_count=7)


class TestMixedDistributions:

    def test_battery_deviation_degenerate(self, symmetric_cdf):
        d = build_battery_dev(symmetric_cdf, AllocationBounds(0.0, 0.0))
        assert d.core_mass == 0.0
        assert_allclose(d.p1 + d.p2, 1.0)

    def test_battery_deviation_known_masses(self, symmetric_cdf):
        d = build_battery_dev(symmetric_cdf, AllocationBounds(-0.5, 0.5))
        assert_allclose([d.p1, d.p2, d.core_mass], [0.38924, 0.38924, 0.22152], atol=1e-5)
        assert d.cdf(-0.6) == 0.0
        assert_allclose(d.cdf(-0.5), d.p1)
        assert d.cdf(0.5) == 1.0

    def test_battery_deviation_wide_bounds(self, symmetric_cdf):
        d = build_battery_dev(symmetric_cdf, AllocationBounds(-30.0, 30.0))
        assert d.p1 + d.p2 < 1e-12
        assert_allclose(d.core_density(0.2), pdf_eval(symmetric_cdf, 0.2))

    def test_grid_deviation_identity_case(self, symmetric_cdf):
        g = build_grid_dev(symmetric_cdf, AllocationBounds(0.0, 0.0))
        assert g.atom_mass == 0.0
        z = np.array([-1.0, -0.2, 0.3, 2.0])
        assert_allclose(g.cdf(z), cdf_eval(symmetric_cdf, z))
        assert_allclose(grid_dev_quantile(g, 0.3), quantile(symmetric_cdf, 0.3), atol=1e-12)

    def test_grid_deviation_atoms(self, symmetric_cdf):
        assert_allclose(build_grid_dev(symmetric_cdf, AllocationBounds(-0.5, 0.5)).atom_mass, 0.22152, atol=1e-5)
        assert build_grid_dev(symmetric_cdf, AllocationBounds(-30.0, 30.0)).atom_mass > 1.0 - 1e-12

    def test_quantile_inside_atom_is_zero(self, symmetric_cdf):
        g = build_grid_dev(symmetric_cdf, AllocationBounds(-0.5, 0.5))
        assert grid_dev_quantile(g, 0.5) == 0.0

    def test_quantile_in_tail(self, symmetric_cdf):
        g = build_grid_dev(symmetric_cdf, AllocationBounds(-0.5, 0.5))
        q95 = grid_dev_quantile(g, 0.95)
        assert_allclose(q95, quantile(symmetric_cdf, 0.95) - 0.5, atol=1e-12)
        assert_allclose(g.cdf(q95), 0.95, atol=1e-12)


class TestMonotoneResponse:

    def test_zero_atom_grows_with_upper_bound(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            F = random_cdf(rng)
            upper = np.linspace(0.0, 6.0, 61)
            atoms = build_grid_dev(F.shifted(-F.mean), AllocationBounds(np.full(61, -0.5), upper)).atom_mass
            assert np.all(np.diff(atoms) >= 0)

    def test_zero_atom_grows_as_lower_bound_drops(self):
        rng = np.random.default_rng(19)
        for _ in range(20):
            F = random_cdf(rng)
            lower = np.linspace(0.0, -6.0, 61)
            atoms = build_grid_dev(F.shifted(-F.mean), AllocationBounds(lower, np.full(61, 0.5))).atom_mass
            assert np.all(np.diff(atoms) >= 0)
