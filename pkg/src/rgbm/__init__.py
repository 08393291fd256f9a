"""Reallocating geometric Brownian motion (RGBM) wealth model.

Simulate coupled agent wealths, measure inequality, fit an annual effective
reallocation rate to observed wealth shares, and compare it with the rate
implied by an equilibrium (stationary-distribution) analysis.
"""

__version__ = "0.1.0"

from .ensemble import (  # noqa: E402
    Ensemble,
    FrozenNoise,
    ModelParams,
    StepConfig,
    fork_noise,
    propagate_year,
    sample_mean,
    simulate_years,
    step,
)
from .inequality import Measure, ShareTarget, gini, lorenz, share_discrepancy, top_share  # noqa: E402
from .calibration import (  # noqa: E402
    CalibrationConfig,
    Datasets,
    TauSeries,
    estimate_sigma,
    fit_mu,
    fit_tau_series,
    fit_tau_year,
    init_lognormal,
    smooth,
    validate_forward,
)
from .equilibrium import (  # noqa: E402
    equilibration_time,
    stationary_model,
    stationary_top_share,
    tau_eqm,
)
