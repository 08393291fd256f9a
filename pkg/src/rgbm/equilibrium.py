"""Equilibrium counterfactual for tau > 0.

In the mean-field limit the relative wealth ``y = x / <x>`` obeys
``dy = -tau (y - 1) dt + sigma y dW``.  Its stationary Fokker-Planck solution
is an inverse gamma density ``p(y) ~ y^(-alpha-1) exp(-beta/y)`` with
``alpha = 1 + 2 tau / sigma^2`` and ``beta = 2 tau / sigma^2`` (mean 1).  An
equilibrium analysis picks the tau whose stationary top share equals an
observed one; that tau is positive by construction, whatever the data do.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize, stats
from scipy.special import gammaln

from .errors import InfeasibleShareError, NoStationaryDistributionError, QuadratureError, UsageError
from .inequality import ShareTarget

__all__ = [
    "TAU_EQM_RANGE",
    "StationaryModel",
    "stationary_model",
    "stationary_top_share",
    "tau_eqm",
    "equilibration_time",
    "EquilibriumTable",
    "tau_eqm_table",
]

TAU_EQM_RANGE = (1e-4, 1e2)
_QUAD_TOL = 1e-10
_QUAD_MAX_ERR = 1e-6


@dataclass(frozen=True)
class StationaryModel:
    alpha: float
    beta: float
    tau: float
    sigma: float

    @property
    def mean(self) -> float:
        return self.beta / (self.alpha - 1.0)

    @property
    def variance(self) -> float:
        """Variance of relative wealth; infinite when ``alpha <= 2``."""
        if self.alpha <= 2.0:
            return math.inf
        return self.beta ** 2 / ((self.alpha - 1.0) ** 2 * (self.alpha - 2.0))

    @property
    def distribution(self):
        return stats.invgamma(self.alpha, scale=self.beta)


def stationary_model(tau: float, sigma: float) -> StationaryModel:
    if not tau > 0:
        raise NoStationaryDistributionError(
            f"no stationary wealth distribution exists for tau = {tau:g} <= 0"
        )
    if not sigma > 0:
        raise UsageError(f"sigma must be > 0, got {sigma}")
    beta = 2.0 * tau / sigma ** 2
    return StationaryModel(alpha=1.0 + beta, beta=beta, tau=tau, sigma=sigma)


def stationary_top_share(model: StationaryModel, q: float) -> float:
    """Long-run share of the richest fraction ``q``: ``E[Y; Y > y_q]``.

    Integrated in ``g = 1/y`` where the density is a gamma: the share is
    ``int_0^{g_q} g^(alpha-2) exp(-beta g) beta^alpha / Gamma(alpha) dg``.
    For ``alpha < 2`` the endpoint singularity goes to QUADPACK's algebraic
    weight; otherwise the integrand is evaluated in log space.
    """
    if not 0.0 < q < 1.0:
        raise UsageError(f"q must lie in (0, 1), got {q}")
    a, b = model.alpha, model.beta
    g_q = stats.gamma.ppf(q, a, scale=1.0 / b)
    log_norm = a * math.log(b) - gammaln(a)
    with np.errstate(under="ignore"):
        if a < 2.0:
            val, err, info = integrate.quad(
                lambda g: math.exp(log_norm - b * g), 0.0, g_q, weight="alg",
                wvar=(a - 2.0, 0.0), epsabs=_QUAD_TOL, epsrel=_QUAD_TOL, limit=200,
                full_output=True)[:3]
        else:
            lo = stats.gamma.ppf(1e-300, a, scale=1.0 / b) if a < 50 else max(
                0.0, (a - 1.0) / b - 40.0 * math.sqrt(a) / b)
            val, err, info = integrate.quad(
                lambda g: math.exp(log_norm + (a - 2.0) * math.log(g) - b * g), lo, g_q,
                epsabs=_QUAD_TOL, epsrel=_QUAD_TOL, limit=200, full_output=True)[:3]
    if not math.isfinite(val) or err > _QUAD_MAX_ERR:
        raise QuadratureError(
            f"tail integral did not converge: alpha={a:.6g}, beta={b:.6g}, q={q:g}, "
            f"value={val:.6g}, error estimate={err:.3g}, evaluations={info.get('neval')}"
        )
    return float(val)


def tau_eqm(target: ShareTarget, sigma: float, xtol: float = 1e-5) -> float:
    """Reallocation rate whose stationary top share equals ``target.share``.

    Bisection on ``log tau`` over :data:`TAU_EQM_RANGE`.  Shares outside the
    range the stationary model can produce raise :class:`InfeasibleShareError`.
    """
    q, share = target.q, target.share
    if share <= q:
        raise InfeasibleShareError(
            f"share {share:g} <= q = {q:g}: sub-uniform top shares have no stationary tau"
        )
    lo, hi = (math.log(v) for v in TAU_EQM_RANGE)
    f = lambda u: stationary_top_share(stationary_model(math.exp(u), sigma), q) - share
    f_lo, f_hi = f(lo), f(hi)
    if f_lo < 0:
        raise InfeasibleShareError(
            f"share {share:g} exceeds the stationary maximum {f_lo + share:.6g} "
            f"reached at tau = {TAU_EQM_RANGE[0]:g}"
        )
    if f_hi > 0:
        raise InfeasibleShareError(
            f"share {share:g} is below the stationary minimum {f_hi + share:.6g} "
            f"reached at tau = {TAU_EQM_RANGE[1]:g}"
        )
    u = optimize.bisect(f, lo, hi, xtol=xtol, maxiter=200)
    return math.exp(u)


def equilibration_time(tau: float, sigma: float) -> float:
    """Relaxation time ``1/(2 tau - sigma^2)`` of the relative-wealth variance.

    The variance obeys ``dv/dt = (sigma^2 - 2 tau) v + sigma^2``; without a
    positive rate it never settles and the time is infinite.
    """
    if not sigma > 0:
        raise UsageError(f"sigma must be > 0, got {sigma}")
    rate = 2.0 * tau - sigma ** 2
    return 1.0 / rate if rate > 0 else math.inf


@dataclass
class EquilibriumTable:
    """Per-year equilibrium rates; ``tau_eqm`` is NaN where infeasible."""

    years: np.ndarray
    tau_eqm: np.ndarray
    feasible: np.ndarray
    too_unequal: np.ndarray

    def for_simulation(self, bracket: tuple[float, float]) -> dict[int, float]:
        """Rates usable for forward propagation.

        Infeasible years take the nearest end of :data:`TAU_EQM_RANGE`,
        clipped into ``bracket`` so the step stays within its stability bound.
        """
        lo, hi = TAU_EQM_RANGE[0], min(TAU_EQM_RANGE[1], bracket[1])
        out = {}
        for y, t, ok, high in zip(self.years.tolist(), self.tau_eqm.tolist(),
                                  self.feasible.tolist(), self.too_unequal.tolist()):
            out[y] = min(t, hi) if ok else (lo if high else hi)
        return out


def tau_eqm_table(datasets, q: float, cfg) -> EquilibriumTable:
    """tau_eqm for every year of a share series (volatility of that year)."""
    from .calibration import resolve_rates

    years, shares = datasets.share_series(q)
    _, sigma_of = resolve_rates(datasets, cfg)
    tau = np.full(years.size, np.nan)
    feasible = np.zeros(years.size, dtype=bool)
    too_unequal = np.zeros(years.size, dtype=bool)
    for j, (year, share) in enumerate(zip(years.tolist(), shares.tolist())):
        target = ShareTarget(q, share)
        try:
            tau[j] = tau_eqm(target, sigma_of(year))
            feasible[j] = True
        except InfeasibleShareError:
            too_unequal[j] = share > q
    return EquilibriumTable(years=years, tau_eqm=tau, feasible=feasible, too_unequal=too_unequal)
