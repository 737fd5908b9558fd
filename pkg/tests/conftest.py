"""Shared fixtures: reference distributions, battery and synthetic day."""

import numpy as np
import pytest

from battery import BatterySpec
from forecast_model import ProsumptionModel, center, fit_forecast, smooth_quantiles, synth_forecast
from mixed_rv import DoubleLogisticCdf

SYMMETRIC_WEIGHTS = (0.5, 2.0, -1.0, 0.5, 2.0, 1.0)


@pytest.fixture
def symmetric_cdf() -> DoubleLogisticCdf:
    """Zero-mean mixture of logistics at -1 and +1 kW."""
    return DoubleLogisticCdf(*SYMMETRIC_WEIGHTS)


@pytest.fixture
def standard_logistic() -> DoubleLogisticCdf:
    return DoubleLogisticCdf(1.0, 1.0, 0.0, 0.0, 1.0, 0.0)


@pytest.fixture
def reference_spec() -> BatterySpec:
    """13.5 kWh / ±5 kW battery half full (e0 = 6.75 kWh)."""
    return BatterySpec.reference()


def random_cdf(rng: np.random.Generator) -> DoubleLogisticCdf:
    w1 = rng.uniform(0.05, 0.95)
    return DoubleLogisticCdf(w1, rng.uniform(0.5, 5.0), rng.uniform(-2.0, 2.0),
                             1.0 - w1, rng.uniform(0.5, 5.0), rng.uniform(-2.0, 2.0))


def model_from_means(means, deviation: DoubleLogisticCdf) -> ProsumptionModel:
    """Prosumption model with the given expected values and one shared deviation shape."""
    means = np.atleast_1d(np.asarray(means, dtype=float))
    centered = deviation.shifted(-float(deviation.mean))
    return center([centered.shifted(m) for m in means])


@pytest.fixture(scope="session")
def pv_dominant_model() -> ProsumptionModel:
    """Fitted 24-step synthetic pv_dominant day (seed 1)."""
    forecast = smooth_quantiles(synth_forecast(1, "pv_dominant"))
    return center([f.cdf for f in fit_forecast(forecast)])
