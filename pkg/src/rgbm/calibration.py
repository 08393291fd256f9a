"""Calibration pipeline: estimate mu and sigma from input data, then fit an
annual effective reallocation rate tau(t) to a wealth-share time series.

Per run, the ensemble is initialised from a lognormal matching the first
year's share and carried forward year by year.  Each year's noise is frozen
before the search, so the objective ``tau -> |S_model(tau) - S_data|`` is a
deterministic function that Nelder-Mead can minimise exactly.  Independent
runs differ only in their derived seeds and are averaged at the end.

Year convention: ``TauSeries.tau[j]`` drives the propagation from
``years[j] - 1`` to ``years[j]`` and was fitted to the share observed in
``years[j]``; that propagation uses the volatility of calendar year
``years[j] - 1``.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from datetime import date
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy import stats
from scipy.special import ndtri

from .ensemble import (
    INIT_STREAM,
    Ensemble,
    ModelParams,
    StepConfig,
    fork_noise,
    propagate_year,
    standard_normals,
)
from .errors import (
    BoundaryHitWarning,
    ConvergenceWarning,
    DataError,
    GapError,
    InfeasibleTargetError,
    InsufficientDataError,
    InvalidStateError,
    UsageError,
)
from .inequality import Measure, ShareTarget, share_discrepancy, top_share
from .neldermead import nelder_mead_1d

__all__ = [
    "DEFAULT_MU",
    "DEFAULT_SIGMA",
    "TRADING_DAYS_PER_YEAR",
    "CalibrationConfig",
    "Datasets",
    "TauSeries",
    "YearFit",
    "ValidationResult",
    "fit_mu",
    "estimate_sigma",
    "sigma_by_year",
    "lognormal_dispersion",
    "init_lognormal",
    "run_seed",
    "resolve_rates",
    "fit_tau_year",
    "fit_tau_run",
    "fit_tau_series",
    "smooth",
    "validate_forward",
    "worker_count",
]

DEFAULT_MU = 0.021
DEFAULT_SIGMA = 0.16
TRADING_DAYS_PER_YEAR = 250
MIN_TRADING_DAYS = 30


@dataclass(frozen=True)
class CalibrationConfig:
    n_agents: int = 1_000_000
    n_runs: int = 10
    seed: int = 0
    substeps_per_year: int = 52
    spin_up_years: int = 3
    smoothing_window_years: int = 10
    tau_bracket: tuple[float, float] = (-1.0, 1.0)
    objective: Measure = Measure.TOP_SHARE_ABS
    tolerance: float = 1e-4
    max_iter: int = 200
    # None: fit from wealth-per-capita data when supplied, else DEFAULT_MU
    mu: Optional[float] = None
    default_sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        object.__setattr__(self, "objective", Measure(self.objective))
        object.__setattr__(self, "tau_bracket", tuple(float(v) for v in self.tau_bracket))
        lo, hi = self.tau_bracket
        if not lo <= 0.0 <= hi or lo == hi:
            raise UsageError(f"tau_bracket must contain 0, got {self.tau_bracket}")
        if self.n_agents < 2 or self.n_runs < 1:
            raise UsageError("n_agents must be >= 2 and n_runs >= 1")
        if self.smoothing_window_years < 1:
            raise UsageError("smoothing_window_years must be >= 1")
        if self.spin_up_years < 0:
            raise UsageError("spin_up_years must be >= 0")
        if not self.tolerance > 0 or self.max_iter < 1:
            raise UsageError("tolerance must be > 0 and max_iter >= 1")
        if self.default_sigma < 0:
            raise UsageError("default_sigma must be >= 0")
        StepConfig(self.substeps_per_year).check_stability(max(abs(lo), abs(hi)))

    @property
    def step_config(self) -> StepConfig:
        return StepConfig(self.substeps_per_year)


@dataclass
class Datasets:
    """Inputs of the pipeline; only ``shares`` is mandatory."""

    shares: dict[int, tuple[ShareTarget, ...]]
    wealth_per_capita: Optional[dict[int, float]] = None
    daily_closes: Optional[dict[date, float]] = None

    @property
    def years(self) -> list[int]:
        return sorted(self.shares)

    def share_series(self, q: float) -> tuple[np.ndarray, np.ndarray]:
        """Contiguous ``(years, shares)`` for fraction ``q``; gaps are errors."""
        years = self.years
        if not years:
            raise DataError("share dataset is empty")
        out = []
        for expected, year in zip(range(years[0], years[-1] + 1), years):
            if year != expected:
                raise GapError(f"share data jump from {expected - 1} to {year}")
            match = [t.share for t in self.shares[year] if math.isclose(t.q, q, rel_tol=1e-9)]
            if not match:
                raise GapError(f"no share for q={q} in year {year}")
            out.append(match[0])
        return np.array(years), np.array(out)

    def targets(self, year: int, q: float, measure: Measure) -> tuple[ShareTarget, ...]:
        if Measure(measure) is Measure.TOP_SHARE_ABS:
            return tuple(t for t in self.shares[year] if math.isclose(t.q, q, rel_tol=1e-9))
        return tuple(self.shares[year])


@dataclass
class TauSeries:
    years: np.ndarray
    tau: np.ndarray
    stderr: np.ndarray
    provenance: str = "raw"
    spinup: Optional[np.ndarray] = None
    n_runs: int = 1
    boundary_hits: Optional[np.ndarray] = None
    fallbacks: Optional[np.ndarray] = None

    def __post_init__(self):
        self.years = np.asarray(self.years, dtype=np.int64)
        self.tau = np.asarray(self.tau, dtype=np.float64)
        self.stderr = np.asarray(self.stderr, dtype=np.float64)
        n = self.years.size
        if self.tau.shape != (n,) or self.stderr.shape != (n,):
            raise InvalidStateError("years, tau and stderr must have equal length")
        if n and np.any(np.diff(self.years) != 1):
            raise GapError("tau series years must be contiguous")
        if not np.isfinite(self.tau).all():
            raise InvalidStateError("tau must be finite in every year")
        if self.provenance not in ("raw", "smoothed", "equilibrium"):
            raise InvalidStateError(f"unknown provenance {self.provenance!r}")
        zeros = lambda dt: np.zeros(n, dtype=dt)
        self.spinup = zeros(bool) if self.spinup is None else np.asarray(self.spinup, dtype=bool)
        self.boundary_hits = (zeros(np.int64) if self.boundary_hits is None
                              else np.asarray(self.boundary_hits, dtype=np.int64))
        self.fallbacks = (zeros(np.int64) if self.fallbacks is None
                          else np.asarray(self.fallbacks, dtype=np.int64))

    def __len__(self) -> int:
        return self.years.size

    def as_mapping(self) -> dict[int, float]:
        return dict(zip(self.years.tolist(), self.tau.tolist()))


@dataclass(frozen=True)
class YearFit:
    tau: float
    ensemble: Ensemble
    objective: float
    n_evals: int
    converged: bool
    boundary_hit: bool
    used_fallback: bool


@dataclass
class ValidationResult:
    years: np.ndarray
    share_data: np.ndarray
    share_model: np.ndarray
    spinup: np.ndarray

    @property
    def abs_err(self) -> np.ndarray:
        return np.abs(self.share_model - self.share_data)

    def mean_abs_error(self, exclude_spinup: bool = True) -> float:
        err = self.abs_err[~self.spinup] if exclude_spinup else self.abs_err
        return float(np.mean(err))


# -- estimators ----------------------------------------------------------------

def fit_mu(wealth_per_capita: Mapping[int, float], t0: Optional[int] = None) -> tuple[float, float]:
    """Least-squares growth rate of ``ln w_t`` on ``t - t0``; returns (mu, stderr)."""
    years = sorted(wealth_per_capita)
    if len(years) < 3:
        raise InsufficientDataError(f"fit_mu needs at least 3 points, got {len(years)}")
    for y in years:
        if not wealth_per_capita[y] > 0:
            raise DataError(f"wealth per capita must be positive; year {y} has {wealth_per_capita[y]}")
    t0 = years[0] if t0 is None else t0
    t = np.array(years, dtype=np.float64) - t0
    logw = np.log(np.array([wealth_per_capita[y] for y in years], dtype=np.float64))
    fit = stats.linregress(t, logw)
    return float(fit.slope), float(fit.stderr)


def estimate_sigma(closes: Sequence[float]) -> float:
    """Annualised volatility of daily log returns within one calendar year."""
    c = np.asarray(closes, dtype=np.float64)
    if c.size < MIN_TRADING_DAYS:
        raise InsufficientDataError(f"need at least {MIN_TRADING_DAYS} closes, got {c.size}")
    if np.any(c <= 0):
        raise DataError("closes must be positive")
    r = np.diff(np.log(c))
    return float(np.std(r, ddof=1) * math.sqrt(TRADING_DAYS_PER_YEAR))


def sigma_by_year(daily_closes: Mapping[date, float]) -> dict[int, float]:
    """Per-year volatility; years with too few trading days are omitted."""
    by_year: dict[int, list[tuple[date, float]]] = {}
    for d, v in daily_closes.items():
        by_year.setdefault(d.year, []).append((d, v))
    out = {}
    for year, rows in sorted(by_year.items()):
        rows.sort()
        try:
            out[year] = estimate_sigma([v for _, v in rows])
        except InsufficientDataError:
            continue
    return out


def resolve_rates(datasets: Datasets, cfg: CalibrationConfig) -> tuple[float, Callable[[int], float]]:
    """Drift and a year -> sigma lookup, applying the documented defaults."""
    t0 = datasets.years[0]
    if cfg.mu is not None:
        mu = cfg.mu
    elif datasets.wealth_per_capita:
        mu, _ = fit_mu(datasets.wealth_per_capita, t0)
    else:
        mu = DEFAULT_MU
    table = sigma_by_year(datasets.daily_closes) if datasets.daily_closes else {}
    default = cfg.default_sigma
    return mu, lambda year: table.get(year, default)


# -- initial condition -----------------------------------------------------------

def lognormal_dispersion(target: ShareTarget) -> float:
    """Log-scale ``s`` of the lognormal whose top-``q`` share is ``target.share``.

    Solves ``Phi(s - Phi^-1(1 - q)) = share``.
    """
    q, share = target.q, target.share
    if share < q or share >= 1.0:
        raise InfeasibleTargetError(
            f"a lognormal cannot give top-{q:g} share {share:g}; need q <= share < 1"
        )
    if share == q:
        return 0.0
    return float(ndtri(share) + ndtri(1.0 - q))


def init_lognormal(n: int, target: ShareTarget, seed: int, time: float = 0.0) -> Ensemble:
    """Lognormal wealths matching ``target``, rescaled to sample mean exactly 1."""
    s = lognormal_dispersion(target)
    z = standard_normals(seed, 0, n, stream=INIT_STREAM)
    x = np.exp(s * z)
    x /= np.sum(x) / n
    return Ensemble(wealths=x, time=float(time), seed=seed, step_count=0)


def run_seed(master_seed: int, run: int) -> int:
    """Independent 64-bit seed for run ``run`` of a master seed."""
    ss = np.random.SeedSequence(int(master_seed) & ((1 << 64) - 1), spawn_key=(int(run),))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)


def worker_count(n_tasks: int, workers: Optional[int] = None) -> int:
    if workers is None:
        env = os.environ.get("RGBM_THREADS")
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(int(workers), n_tasks))


def _map_runs(fn, args_list: list[tuple], workers: int) -> list:
    if workers <= 1:
        return [fn(*a) for a in args_list]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *a) for a in args_list]
        return [f.result() for f in futures]


# -- fitting -------------------------------------------------------------------

def fit_tau_year(ensemble: Ensemble, targets: Union[ShareTarget, Sequence[ShareTarget]],
                 mu: float, sigma: float, cfg: CalibrationConfig) -> YearFit:
    """Fit one year's tau under frozen noise and propagate the ensemble with it."""
    step_cfg = cfg.step_config
    noise = fork_noise(ensemble, step_cfg)
    noise.growth_factors(mu, sigma, step_cfg.dt)
    w = ensemble.wealths

    def objective(tau: float) -> float:
        x = noise.propagate(w, ModelParams(mu, sigma, tau), step_cfg)
        return share_discrepancy(x, targets, cfg.objective)

    res = nelder_mead_1d(objective, 0.0, 0.05, cfg.tau_bracket, cfg.tolerance, cfg.max_iter)
    if res.boundary_hit:
        warnings.warn(f"tau fit at t={ensemble.time + 1:g} stopped at the bracket edge "
                      f"({res.x:.6g})", BoundaryHitWarning, stacklevel=2)
    if res.used_fallback:
        warnings.warn(f"Nelder-Mead did not converge at t={ensemble.time + 1:g}; "
                      "golden-section fallback used", ConvergenceWarning, stacklevel=2)
    after = propagate_year(ensemble, ModelParams(mu, sigma, res.x), step_cfg, noise)
    return YearFit(tau=res.x, ensemble=after, objective=res.fun, n_evals=res.n_evals,
                   converged=res.converged, boundary_hit=res.boundary_hit,
                   used_fallback=res.used_fallback)


def fit_tau_run(datasets: Datasets, q: float, cfg: CalibrationConfig, run: int) -> dict:
    """One independent run: per-year tau plus diagnostic flags."""
    years, shares = datasets.share_series(q)
    mu, sigma_of = resolve_rates(datasets, cfg)
    ens = init_lognormal(cfg.n_agents, ShareTarget(q, shares[0]), run_seed(cfg.seed, run),
                         time=float(years[0]))
    n = years.size - 1
    tau = np.empty(n)
    hits = np.zeros(n, dtype=np.int64)
    fallbacks = np.zeros(n, dtype=np.int64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryHitWarning)
        warnings.simplefilter("ignore", ConvergenceWarning)
        for j, year in enumerate(years[1:]):
            fit = fit_tau_year(ens, datasets.targets(int(year), q, cfg.objective),
                               mu, sigma_of(int(year) - 1), cfg)
            tau[j], hits[j], fallbacks[j] = fit.tau, fit.boundary_hit, fit.used_fallback
            ens = fit.ensemble
    return {"tau": tau, "boundary_hits": hits, "fallbacks": fallbacks}


def fit_tau_series(datasets: Datasets, q: float, cfg: CalibrationConfig,
                   workers: Optional[int] = None) -> TauSeries:
    """Cross-run mean of the annual fits, with standard errors across runs.

    With a single run the standard error is undefined and reported as NaN.
    """
    years, _ = datasets.share_series(q)
    if years.size < 2:
        raise InsufficientDataError("need at least two years of share data to fit tau")
    args = [(datasets, q, cfg, r) for r in range(cfg.n_runs)]
    runs = _map_runs(fit_tau_run, args, worker_count(cfg.n_runs, workers))
    taus = np.stack([r["tau"] for r in runs])
    # moments about the first run: identical runs give exactly zero spread
    dev = taus - taus[0]
    mean = taus[0] + dev.mean(axis=0)
    if cfg.n_runs > 1:
        stderr = dev.std(axis=0, ddof=1) / math.sqrt(cfg.n_runs)
    else:
        stderr = np.full(mean.shape, np.nan)
    fitted_years = years[1:]
    spinup = np.arange(fitted_years.size) < cfg.spin_up_years
    return TauSeries(years=fitted_years, tau=mean, stderr=stderr, provenance="raw",
                     spinup=spinup, n_runs=cfg.n_runs,
                     boundary_hits=sum(r["boundary_hits"] for r in runs),
                     fallbacks=sum(r["fallbacks"] for r in runs))


def smooth(series: TauSeries, window_years: int) -> TauSeries:
    """Central moving average, truncated (never padded) at both ends.

    The window covers ``window_years // 2`` years on each side, so it stays
    centred for even widths; ``window_years = 1`` is the identity.
    """
    if window_years < 1:
        raise UsageError(f"window must be >= 1, got {window_years}")
    half = window_years // 2
    n = len(series)
    tau = np.empty(n)
    se = np.empty(n)
    for i in range(n):
        lo, hi = max(0, i - half), min(n, i + half + 1)
        tau[i] = np.mean(series.tau[lo:hi])
        se[i] = math.sqrt(np.sum(series.stderr[lo:hi] ** 2)) / (hi - lo)
    return replace(series, tau=tau, stderr=se, provenance="smoothed")


# -- forward validation ----------------------------------------------------------

def _validate_run(datasets: Datasets, tau_by_year: dict[int, float], q: float,
                  cfg: CalibrationConfig, run: int) -> np.ndarray:
    years, shares = datasets.share_series(q)
    mu, sigma_of = resolve_rates(datasets, cfg)
    step_cfg = cfg.step_config
    ens = init_lognormal(cfg.n_agents, ShareTarget(q, shares[0]), run_seed(cfg.seed, run),
                         time=float(years[0]))
    out = np.empty(years.size - 1)
    for j, year in enumerate(years[1:]):
        params = ModelParams(mu, sigma_of(int(year) - 1), tau_by_year[int(year)])
        ens = propagate_year(ens, params, step_cfg)
        out[j] = top_share(ens.wealths, q)
    return out


def validate_forward(datasets: Datasets, series: TauSeries, q: float, cfg: CalibrationConfig,
                     workers: Optional[int] = None) -> ValidationResult:
    """Propagate the lognormal start with a given tau series, no refitting.

    Uses the same run seeds as the fit; the model share is the cross-run mean.
    """
    years, shares = datasets.share_series(q)
    tau_by_year = series.as_mapping()
    missing = [int(y) for y in years[1:] if int(y) not in tau_by_year]
    if missing:
        raise GapError(f"tau series lacks years {missing[:5]}{'...' if len(missing) > 5 else ''}")
    args = [(datasets, tau_by_year, q, cfg, r) for r in range(cfg.n_runs)]
    runs = _map_runs(_validate_run, args, worker_count(cfg.n_runs, workers))
    model = np.mean(np.stack(runs), axis=0)
    spinup = np.arange(years.size - 1) < cfg.spin_up_years
    return ValidationResult(years=years[1:], share_data=shares[1:], share_model=model,
                            spinup=spinup)
