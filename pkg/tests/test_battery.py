"""Tests for the battery step functions, trajectories and feasibility checks."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from battery import (
    BatterySpec,
    InvalidBatterySpecError,
    check_feasible,
    envelope_step,
    expected_state_step,
    nominal_step,
    simulate_trajectory,
)
from mixed_rv import AllocationBounds


class TestBatterySpec:

    def test_reference_defaults(self, reference_spec):
        assert reference_spec.e0 == 6.75
        assert reference_spec.loss_coefficient == 0.05

    @pytest.mark.parametrize("overrides", [
        {"e_min": 14.0},
        {"e0": 20.0},
        {"p_min": 1.0},
        {"loss_coefficient": 1.0},
        {"step_hours": 0.0},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(InvalidBatterySpecError):
            BatterySpec.reference(**overrides)

    def test_with_initial_energy(self, reference_spec):
        assert reference_spec.with_initial_energy(2.0).e0 == 2.0


class TestStepFunctions:

    def test_discharge(self, reference_spec):
        assert_allclose(nominal_step(6.75, 2.0, reference_spec), 4.65)

    def test_idle(self, reference_spec):
        assert nominal_step(6.75, 0.0, reference_spec) == 6.75

    def test_charge(self, reference_spec):
        assert_allclose(nominal_step(6.75, -3.0, reference_spec), 9.6)

    def test_envelope_upper_bound(self, reference_spec):
        assert_allclose(envelope_step(0.0, 0.0, AllocationBounds(0.0, 1.0), reference_spec), (-1.05, 0.0))

    def test_envelope_lower_bound(self, reference_spec):
        assert_allclose(envelope_step(0.0, 0.0, AllocationBounds(-2.0, 0.0), reference_spec), (0.0, 1.9))

    def test_envelope_without_allocation(self, reference_spec):
        assert envelope_step(0.3, -0.2, AllocationBounds(0.0, 0.0), reference_spec) == (0.3, -0.2)

    def test_expected_state(self, reference_spec):
        assert_allclose(expected_state_step(6.75, 0.0, 0.5, reference_spec), 6.75 - 0.525)


class TestSimulateTrajectory:

    def test_zero_expected_deviation_tracks_nominal(self, reference_spec):
        p = np.array([1.0, -2.0, 0.5])
        traj = simulate_trajectory(p, np.full(3, -0.5), np.full(3, 0.5), None, reference_spec)
        assert_allclose(traj.expected_energy, traj.energy)
        assert traj.energy.size == 4
        assert traj.energy[0] == reference_spec.e0

    def test_positive_expected_deviation_drains_below_nominal(self, reference_spec):
        traj = simulate_trajectory(np.zeros(4), np.zeros(4), np.ones(4), np.full(4, 0.3), reference_spec)
        assert np.all(np.diff(traj.expected_energy - traj.energy) < 0)

    def test_envelopes_accumulate(self, reference_spec):
        traj = simulate_trajectory(np.zeros(3), np.full(3, -1.0), np.full(3, 1.0), None, reference_spec)
        assert_allclose(traj.delta_e_min, [0.0, -1.05, -2.1, -3.15])
        assert_allclose(traj.delta_e_max, [0.0, 0.95, 1.9, 2.85])
        assert_allclose(traj.lower_envelope, traj.energy + traj.delta_e_min)

    def test_mismatched_lengths(self, reference_spec):
        with pytest.raises(ValueError):
            simulate_trajectory(np.zeros(3), np.zeros(2), np.zeros(3), None, reference_spec)


class TestCheckFeasible:

    def test_idle_schedule(self, reference_spec):
        traj = simulate_trajectory(np.zeros(24), np.zeros(24), np.zeros(24), None, reference_spec)
        report = check_feasible(traj, AllocationBounds(np.zeros(24), np.zeros(24)), reference_spec)
        assert report.feasible
        assert report.max_violation == 0.0

    def test_power_violation(self, reference_spec):
        bounds = AllocationBounds(np.zeros(1), np.ones(1))
        traj = simulate_trajectory(np.array([5.0]), bounds.x_lower, bounds.x_upper, None, reference_spec)
        report = check_feasible(traj, bounds, reference_spec)
        violation = report.first("power_max")
        assert violation.step == 0
        assert_allclose(violation.magnitude, 1.0)

    def test_energy_violation_at_first_offending_step(self, reference_spec):
        K = 6
        charge = np.full(K, -2.0)
        bounds = AllocationBounds(np.full(K, -1.0), np.zeros(K))
        traj = simulate_trajectory(charge, bounds.x_lower, bounds.x_upper, None, reference_spec)
        report = check_feasible(traj, bounds, reference_spec)

        upper = reference_spec.e0 + np.cumsum(np.full(K, 1.9)) + np.cumsum(np.full(K, 0.95))
        first = int(np.flatnonzero(upper - reference_spec.e_max > 1e-6)[0])
        assert report.first("energy_max").step == first + 1

    def test_rejects_mismatched_bounds(self, reference_spec):
        traj = simulate_trajectory(np.zeros(2), np.zeros(2), np.zeros(2), None, reference_spec)
        with pytest.raises(ValueError):
            check_feasible(traj, AllocationBounds(np.zeros(3), np.zeros(3)), reference_spec)

    def test_violations_sorted_by_step(self, reference_spec):
        K = 10
        traj = simulate_trajectory(np.full(K, 5.0), np.zeros(K), np.ones(K), None, reference_spec)
        report = check_feasible(traj, AllocationBounds(np.zeros(K), np.ones(K)), reference_spec)
        steps = [v.step for v in report.violations]
        assert_array_equal(steps, sorted(steps))
