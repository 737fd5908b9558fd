"""Tests for quantile ingestion, smoothing, fitting and synthetic days."""

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.integrate import quad

from conftest import SYMMETRIC_WEIGHTS, random_cdf
from constants import QUANTILE_LEVELS
from forecast_model import (
    DegenerateQuantileCurveError,
    QuantileForecast,
    QuantileParseError,
    QuantileStep,
    QuantileValidationError,
    UnknownProfileError,
    center,
    fit_double_logistic,
    fit_forecast,
    hour_labels,
    load_fitted_model,
    parse_quantile_file,
    smooth_quantiles,
    synth_forecast,
    write_fitted_model,
    write_quantile_file,
)
from mixed_rv import DoubleLogisticCdf, cdf_eval, pdf_eval, quantile

LEVELS = np.asarray(QUANTILE_LEVELS)


def _write_rows(path, rows, header="step,level,value_kw"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


class TestParseQuantileFile:

    def test_full_day(self, tmp_path):
        path = tmp_path / "day.csv"
        write_quantile_file(synth_forecast(1, "pv_dominant"), path)
        forecast = parse_quantile_file(path)
        assert forecast.horizon_steps == 24
        assert all(step.levels.size == 99 for step in forecast.steps)

    def test_level_out_of_range(self, tmp_path):
        path = _write_rows(tmp_path / "bad.csv", ["0,0.5,1.0", "0,1.2,2.0"])
        with pytest.raises(QuantileValidationError, match="line 3"):
            parse_quantile_file(path)

    def test_shuffled_rows_are_resorted(self, tmp_path):
        original = synth_forecast(3, "pv_dominant", horizon=4)
        path = tmp_path / "day.csv"
        write_quantile_file(original, path)
        frame = pd.read_csv(path, float_precision="round_trip")
        frame.sample(frac=1.0, random_state=0).to_csv(path, index=False, float_format="%.17g")

        parsed = parse_quantile_file(path)
        for a, b in zip(original.steps, parsed.steps):
            assert_array_equal(a.levels, b.levels)
            assert_array_equal(a.values, b.values)

    def test_full_precision_levels_read_back_exactly(self, tmp_path):
        levels = np.sort(np.random.default_rng(4).uniform(0.001, 0.999, 99))
        values = np.linspace(-3.0, 3.0, 99) + 1e-3 * levels
        path = tmp_path / "day.csv"
        write_quantile_file(QuantileForecast((QuantileStep(levels, values),)), path)
        step = parse_quantile_file(path).steps[0]
        assert_array_equal(step.levels, levels)
        assert_array_equal(step.values, values)

    def test_non_finite_value_rejected(self, tmp_path):
        path = _write_rows(tmp_path / "bad.csv", ["0,0.1,1.0", "0,0.2,inf"])
        with pytest.raises(QuantileParseError) as excinfo:
            parse_quantile_file(path)
        assert excinfo.value.line == 3

    def test_malformed_row_names_line(self, tmp_path):
        path = _write_rows(tmp_path / "bad.csv", ["0,0.1,1.0", "0,abc,1.0"])
        with pytest.raises(QuantileParseError) as excinfo:
            parse_quantile_file(path)
        assert excinfo.value.line == 3

    def test_wrong_header(self, tmp_path):
        path = _write_rows(tmp_path / "bad.csv", ["0,0.1,1.0"], header="t,q,v")
        with pytest.raises(QuantileParseError) as excinfo:
            parse_quantile_file(path)
        assert excinfo.value.line == 1

    def test_step_gap(self, tmp_path):
        path = _write_rows(tmp_path / "gap.csv", ["0,0.5,1.0", "2,0.5,1.0"])
        with pytest.raises(QuantileValidationError, match="contiguous"):
            parse_quantile_file(path)

    def test_duplicate_level(self, tmp_path):
        path = _write_rows(tmp_path / "dup.csv", ["0,0.5,1.0", "0,0.5,1.5"])
        with pytest.raises(QuantileValidationError, match="duplicate"):
            parse_quantile_file(path)


class TestSmoothQuantiles:

    def _forecast(self, levels, values):
        return QuantileForecast((QuantileStep(np.asarray(levels, float), np.asarray(values, float)),))

    def test_linear_curve_unchanged(self):
        values = np.linspace(-2.0, 2.0, 99)
        smoothed = smooth_quantiles(self._forecast(LEVELS, values)).steps[0].values
        assert_allclose(smoothed, values, atol=1e-12)

    def test_crossing_pair_removed(self):
        values = np.asarray(quantile(DoubleLogisticCdf(*SYMMETRIC_WEIGHTS), LEVELS))
        values[49], values[50] = values[50] + 0.1, values[49]
        smoothed = smooth_quantiles(self._forecast(LEVELS, values)).steps[0].values
        assert np.all(np.diff(smoothed) >= 0)

    def test_three_levels(self):
        smoothed = smooth_quantiles(self._forecast([0.1, 0.5, 0.9], [1.0, 0.0, 2.0])).steps[0].values
        assert np.all(np.diff(smoothed) >= 0)
        assert_allclose(smoothed, [0.0, 1.0, 2.0])


class TestFitDoubleLogistic:

    def test_recovers_known_mixture(self):
        truth = DoubleLogisticCdf(*SYMMETRIC_WEIGHTS)
        result = fit_double_logistic(LEVELS, quantile(truth, LEVELS))
        assert_allclose(result.cdf.params, SYMMETRIC_WEIGHTS, atol=1e-3)
        assert not result.degraded

    def test_single_logistic(self):
        truth = DoubleLogisticCdf(1.0, 1.5, 0.7, 0.0, 1.0, 0.0)
        result = fit_double_logistic(LEVELS, quantile(truth, LEVELS))
        assert result.fit_rms <= 1e-6

    def test_symmetric_curve_has_zero_mean(self):
        truth = DoubleLogisticCdf(*SYMMETRIC_WEIGHTS)
        result = fit_double_logistic(LEVELS, quantile(truth, LEVELS))
        assert abs(result.cdf.mean) <= 1e-6

    def test_components_sorted_by_location(self):
        rng = np.random.default_rng(2)
        result = fit_double_logistic(LEVELS, quantile(random_cdf(rng), LEVELS))
        assert result.cdf.w3 <= result.cdf.w6

    def test_min_spread_caps_inverse_scales(self):
        steep = DoubleLogisticCdf(0.5, 20.0, -0.1, 0.5, 20.0, 0.1)
        result = fit_double_logistic(LEVELS, quantile(steep, LEVELS), min_spread_kw=0.5)
        assert result.cdf.w2 <= 2.0 + 1e-9
        assert result.cdf.w5 <= 2.0 + 1e-9

    def test_degenerate_curve(self):
        with pytest.raises(DegenerateQuantileCurveError):
            fit_double_logistic(LEVELS, np.full(LEVELS.size, 1.5))

    def test_too_few_levels(self):
        with pytest.raises(ValueError):
            fit_double_logistic([0.25, 0.5, 0.75], [-1.0, 0.0, 1.0])

    def test_fitted_day_reproduces_its_levels(self):
        forecast = smooth_quantiles(synth_forecast(1, "pv_dominant"))
        for step, fit in zip(forecast.steps, fit_forecast(forecast)):
            misses = np.abs(np.asarray(cdf_eval(fit.cdf, step.values)) - step.levels)
            assert np.max(misses) <= 0.02
            assert_allclose(fit.max_abs_residual, np.max(misses), rtol=1e-12)

    def test_parallel_fits_match_sequential(self):
        forecast = synth_forecast(4, "pv_dominant", horizon=6)
        sequential = fit_forecast(forecast)
        parallel = fit_forecast(forecast, workers=3)
        for a, b in zip(sequential, parallel):
            assert a.cdf == b.cdf


class TestCenter:

    def test_zero_mean_input(self):
        model = center([DoubleLogisticCdf(*SYMMETRIC_WEIGHTS)])
        assert_allclose(model.expected, [0.0], atol=1e-15)
        assert model.step_cdf(0) == DoubleLogisticCdf(*SYMMETRIC_WEIGHTS)

    def test_single_logistic_location(self):
        model = center([DoubleLogisticCdf(1.0, 1.0, 3.0, 0.0, 1.0, 0.0)])
        assert_allclose(model.expected, [3.0])
        assert model.step_cdf(0).w3 == 0.0

    def test_random_centered_mean_vanishes(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            F = center([random_cdf(rng)]).step_cdf(0)
            breaks = [-np.inf, *sorted((F.w3, F.w6)), np.inf]
            mean = sum(quad(lambda z: z * pdf_eval(F, z), a, b, epsabs=1e-13, limit=200)[0]
                       for a, b in zip(breaks[:-1], breaks[1:]))
            assert abs(mean) <= 1e-9


class TestFittedModelFile:

    def test_round_trip(self, tmp_path):
        fits = fit_forecast(synth_forecast(1, "pv_dominant", horizon=3))
        write_fitted_model(tmp_path / "fitted.json", fits)
        loaded = load_fitted_model(tmp_path / "fitted.json")
        assert [f.cdf for f in loaded] == [f.cdf for f in fits]
        assert [f.fit_rms for f in loaded] == [f.fit_rms for f in fits]
        assert [f.max_abs_residual for f in loaded] == [f.max_abs_residual for f in fits]
        assert [f.degraded for f in loaded] == [f.degraded for f in fits]


class TestSyntheticProfiles:

    def test_deterministic(self):
        a = synth_forecast(1, "pv_dominant")
        b = synth_forecast(1, "pv_dominant")
        for sa, sb in zip(a.steps, b.steps):
            assert_array_equal(sa.values, sb.values)

    def test_flat_profile_shares_one_curve(self):
        forecast = synth_forecast(1, "flat")
        for step in forecast.steps[1:]:
            assert_array_equal(step.values, forecast.steps[0].values)

    def test_asymmetric_morning_is_right_skewed(self):
        forecast = smooth_quantiles(synth_forecast(2, "asymmetric_morning"))
        F = center([fit_double_logistic(forecast.steps[0].levels, forecast.steps[0].values).cdf]).step_cdf(0)
        third, _ = quad(lambda z: z**3 * pdf_eval(F, z), -np.inf, np.inf, limit=200)
        assert third > 0

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_pv_dominant_surplus_through_midday(self, seed):
        model = center([f.cdf for f in fit_forecast(smooth_quantiles(synth_forecast(seed, "pv_dominant")))])
        assert np.all(model.expected[4:11] < 0)

    def test_unknown_profile(self):
        with pytest.raises(UnknownProfileError):
            synth_forecast(1, "windy")

    def test_hour_labels(self):
        labels = hour_labels(24)
        assert labels[0] == "06:00"
        assert labels[6] == "12:00"
        assert labels[18] == "00:00"
        assert synth_forecast(1, "flat", horizon=2).hour_label(1) == "07:00"
