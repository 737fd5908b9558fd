"""Constants used throughout the application."""

from pathlib import Path

# Reference residential battery (13.5 kWh, 5 kW, 5% losses)
REFERENCE_BATTERY: dict[str, float] = {
    "e_min": 0.0,
    "e_max": 13.5,
    "p_min": -5.0,
    "p_max": 5.0,
    "loss_coefficient": 0.05,
}

# Cost-weight presets; c3/c4 are per-step, "critical" entries override the
# default inside CRITICAL_WINDOW (steps counted from 06:00, so 12:00-14:00).
CASE_WEIGHTS: dict[str, dict[str, float]] = {
    "case1": {"c1": 2.0, "c2": 1.0, "c3": 0.0, "c4": 0.0},
    "case2": {"c1": 2.0, "c2": 1.0, "c3": 0.5, "c4": 0.5},
    "case3": {"c1": 2.0, "c2": 1.0, "c3": 2.0, "c4": 2.0, "c4_critical": 100.0},
}
CRITICAL_WINDOW: tuple[int, ...] = (6, 7)

# Horizon convention: 24 hourly steps labelled from 06:00
DEFAULT_HORIZON = 24
DEFAULT_START_HOUR = 6
DEFAULT_STEP_HOURS = 1.0
QUANTILE_LEVELS: tuple[float, ...] = tuple(round(0.01 * i, 2) for i in range(1, 100))

# Quadrature
DEFAULT_NODE_COUNT = 128
DEFAULT_TAIL_CUTOFF = 1e-6
EXPONENT_CLAMP = 700.0

# Fitting
MIN_INVERSE_SCALE = 1e-3
MAX_INVERSE_SCALE = 50.0
FIT_MAX_EVALUATIONS = 2000

# Tolerances
FEASIBILITY_TOL = 1e-6
COMPLEMENTARITY_SLACK = 1e-8
ZERO_DEVIATION_TOL = 1e-12
ABS_SMOOTHING_SHARPNESS = 1e3

PAIRING_MODES: tuple[str, ...] = ("default", "literal_paper_pairing")
GRADIENT_MODES: tuple[str, ...] = ("analytic", "finite-difference")

PROJECT_ROOT = Path(__file__).resolve().parent.parent
PRESETS_DIR = PROJECT_ROOT / "scenarios"
DEFAULT_OUTPUT_DIR = Path("runs")

LOG_FORMAT = "[%(asctime)s] %(name)s: %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
LOG_FILE_NAME = "run.log"
