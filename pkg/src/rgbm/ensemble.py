"""Reallocating geometric Brownian motion: ensemble state and time stepping.

Each agent's wealth follows

    dx_i = x_i (mu dt + sigma dW_i) - tau (x_i - <x>_N) dt

integrated with an explicit Euler-Maruyama scheme.  The population mean is
taken from the pre-step wealths, so the reallocation term sums to zero over
the population and conserves total wealth to rounding.

Noise is counter based: the Gaussian variate of agent ``i`` at global substep
``k`` is a pure function of ``(seed, k, i)``.  Agents are grouped in fixed
chunks of ``NOISE_CHUNK``; each chunk is drawn from a Philox generator whose
key is the seed and whose counter encodes ``(chunk, k)``.  Because nothing
depends on execution order, a whole year of noise can be frozen and replayed
(:func:`fork_noise`), which makes calibration objectives deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Iterator, Mapping, Optional, Union

import numpy as np

from .errors import InvalidStateError, NumericalOverflowError, StabilityError

__all__ = [
    "NOISE_CHUNK",
    "ModelParams",
    "StepConfig",
    "Ensemble",
    "FrozenNoise",
    "standard_normals",
    "sample_mean",
    "step",
    "simulate_years",
    "propagate_year",
    "fork_noise",
]

NOISE_CHUNK = 1 << 16
_MASK64 = (1 << 64) - 1

# Philox key word 1; keeps step noise and initial-condition draws disjoint.
NOISE_STREAM = 0x52474D4E
INIT_STREAM = 0x52474D49


@dataclass(frozen=True)
class ModelParams:
    """Drift ``mu`` (1/year), volatility ``sigma`` (1/sqrt(year)) and
    reallocation rate ``tau`` (1/year, either sign)."""

    mu: float
    sigma: float
    tau: float

    def __post_init__(self):
        for name in ("mu", "sigma", "tau"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidStateError(f"{name} must be finite, got {getattr(self, name)!r}")
        if self.sigma < 0:
            raise InvalidStateError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class StepConfig:
    substeps_per_year: int = 52

    def __post_init__(self):
        if int(self.substeps_per_year) != self.substeps_per_year or self.substeps_per_year < 1:
            raise InvalidStateError(
                f"substeps_per_year must be a positive integer, got {self.substeps_per_year!r}"
            )

    @property
    def dt(self) -> float:
        return 1.0 / self.substeps_per_year

    def check_stability(self, tau: float) -> None:
        """Raise unless ``dt < 1/|tau|`` (no overshoot of the mean coupling)."""
        if tau != 0 and self.dt * abs(tau) >= 1.0:
            raise StabilityError(
                f"dt={self.dt:.6g} violates the stability bound dt < 1/|tau| for tau={tau:.6g}; "
                f"increase substeps_per_year above {abs(tau):.6g}"
            )


@dataclass(frozen=True)
class Ensemble:
    """N agent wealths at calendar time ``time``.

    ``seed`` and ``step_count`` locate the ensemble in its noise lineage:
    the next substep draws the variates for global step ``step_count``.
    """

    wealths: np.ndarray
    time: float = 0.0
    seed: int = 0
    step_count: int = 0

    def __post_init__(self):
        w = np.asarray(self.wealths, dtype=np.float64)
        if w.ndim != 1:
            raise InvalidStateError(f"wealths must be one-dimensional, got shape {w.shape}")
        if w.size < 2:
            raise InvalidStateError(f"an ensemble needs at least 2 agents, got {w.size}")
        if not np.isfinite(w).all():
            raise InvalidStateError("wealths must all be finite")
        object.__setattr__(self, "wealths", w)
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)

    @property
    def n(self) -> int:
        return self.wealths.size

    @property
    def year(self) -> int:
        return int(math.floor(self.time + 1e-9))

    def readonly(self) -> "Ensemble":
        w = self.wealths.view()
        w.flags.writeable = False
        return replace(self, wealths=w)

    def relative(self) -> np.ndarray:
        """Wealths divided by the sample mean."""
        return self.wealths / sample_mean(self)


def _philox(seed: int, stream: int, step: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(key=[seed & _MASK64, stream], counter=[0, chunk, step, 0])
    )


def standard_normals(seed: int, step: int, n: int, stream: int = NOISE_STREAM,
                     out: Optional[np.ndarray] = None) -> np.ndarray:
    """Standard normal variates for agents ``0..n-1`` at global substep ``step``.

    Agent ``i``'s value does not depend on ``n``; only on ``(seed, step, i)``.
    """
    if out is None:
        out = np.empty(n)
    for chunk, start in enumerate(range(0, n, NOISE_CHUNK)):
        stop = min(start + NOISE_CHUNK, n)
        _philox(seed, stream, step, chunk).standard_normal(out=out[start:stop])
    return out


def _growth_factors(xi: np.ndarray, mu: float, sigma: float, dt: float) -> np.ndarray:
    # 1 + mu dt + sigma sqrt(dt) xi, evaluated identically for 1-D and 2-D blocks
    a = xi * (sigma * math.sqrt(dt))
    a += mu * dt
    a += 1.0
    return a


def _advance(x: np.ndarray, rows: Iterable[np.ndarray], tau_dt: float, first_step: int) -> None:
    """In-place Euler-Maruyama substeps ``x <- x a_k - tau dt (x - <x>)``.

    ``a_k = 1 + mu dt + sigma sqrt(dt) xi_k``.  The reallocation term is exactly
    zero for agents at the mean, and for ``tau = 0`` the update is ``x * a_k``.
    """
    n = x.size
    buf = np.empty_like(x)
    k = -1
    # overflow is reported below as NumericalOverflowError
    with np.errstate(over="ignore", invalid="ignore"):
        for k, a in enumerate(rows):
            m = np.sum(x) / n  # numpy reduces contiguous float arrays pairwise
            np.subtract(x, m, out=buf)
            buf *= tau_dt
            x *= a
            x -= buf
    if not np.isfinite(x).all():
        agent = int(np.flatnonzero(~np.isfinite(x))[0])
        raise NumericalOverflowError(
            f"non-finite wealth for agent {agent} by step {first_step + k}"
        )


def sample_mean(ensemble: Union[Ensemble, np.ndarray]) -> float:
    """Arithmetic mean of the wealths, using pairwise summation."""
    x = ensemble.wealths if isinstance(ensemble, Ensemble) else np.asarray(ensemble, dtype=np.float64)
    if x.size == 0:
        raise InvalidStateError("sample mean of an empty ensemble")
    return float(np.sum(x) / x.size)


def step(ensemble: Ensemble, params: ModelParams, cfg: StepConfig = StepConfig()) -> Ensemble:
    """Advance the ensemble by one substep of length ``cfg.dt``."""
    cfg.check_stability(params.tau)
    dt = cfg.dt
    xi = standard_normals(ensemble.seed, ensemble.step_count, ensemble.n)
    x = ensemble.wealths.copy()
    _advance(x, [_growth_factors(xi, params.mu, params.sigma, dt)], params.tau * dt,
             ensemble.step_count)
    return replace(ensemble, wealths=x, time=ensemble.time + dt,
                   step_count=ensemble.step_count + 1)


class FrozenNoise:
    """One year of substep noise for a given ensemble, replayable at will.

    Propagating the same wealth vector through the same frozen block with the
    same parameters gives bit-identical results; different ``tau`` values see
    exactly the same Gaussian variates.
    """

    def __init__(self, seed: int, start_step: int, n_steps: int, n_agents: int):
        self.seed = int(seed) & _MASK64
        self.start_step = int(start_step)
        self.n_steps = int(n_steps)
        self.n_agents = int(n_agents)
        self._normals: Optional[np.ndarray] = None
        self._factors_key = None
        self._factors: Optional[np.ndarray] = None

    @property
    def normals(self) -> np.ndarray:
        if self._normals is None:
            z = np.empty((self.n_steps, self.n_agents))
            for k in range(self.n_steps):
                standard_normals(self.seed, self.start_step + k, self.n_agents, out=z[k])
            z.flags.writeable = False
            self._normals = z
        return self._normals

    def growth_factors(self, mu: float, sigma: float, dt: float) -> np.ndarray:
        key = (mu, sigma, dt)
        if self._factors_key != key:
            self._factors = _growth_factors(self.normals, mu, sigma, dt)
            self._factors.flags.writeable = False
            self._factors_key = key
        return self._factors

    def propagate(self, wealths: np.ndarray, params: ModelParams,
                  cfg: StepConfig = StepConfig()) -> np.ndarray:
        """Return the wealths after replaying this block under ``params``."""
        if cfg.substeps_per_year != self.n_steps:
            raise InvalidStateError(
                f"frozen block holds {self.n_steps} substeps, config asks for {cfg.substeps_per_year}"
            )
        if wealths.size != self.n_agents:
            raise InvalidStateError(f"frozen block is for {self.n_agents} agents, got {wealths.size}")
        cfg.check_stability(params.tau)
        x = np.array(wealths, dtype=np.float64)
        _advance(x, self.growth_factors(params.mu, params.sigma, cfg.dt), params.tau * cfg.dt,
                 self.start_step)
        return x


def fork_noise(ensemble: Ensemble, cfg: StepConfig = StepConfig()) -> FrozenNoise:
    """Freeze the noise of the ensemble's next simulated year."""
    return FrozenNoise(ensemble.seed, ensemble.step_count, cfg.substeps_per_year, ensemble.n)


def _live_rows(seed: int, start: int, n_steps: int, n: int,
               params: ModelParams, dt: float) -> Iterator[np.ndarray]:
    xi = np.empty(n)
    for k in range(n_steps):
        standard_normals(seed, start + k, n, out=xi)
        yield _growth_factors(xi, params.mu, params.sigma, dt)


def propagate_year(ensemble: Ensemble, params: ModelParams, cfg: StepConfig = StepConfig(),
                   noise: Optional[FrozenNoise] = None) -> Ensemble:
    """Advance exactly one year; with ``noise`` given, replay that frozen block.

    The live and frozen paths draw the same variates, so both give the same bits.
    """
    k = cfg.substeps_per_year
    if noise is not None:
        if noise.start_step != ensemble.step_count or noise.seed != ensemble.seed:
            raise InvalidStateError("frozen noise was forked from a different ensemble state")
        x = noise.propagate(ensemble.wealths, params, cfg)
    else:
        cfg.check_stability(params.tau)
        x = ensemble.wealths.copy()
        _advance(x, _live_rows(ensemble.seed, ensemble.step_count, k, ensemble.n, params, cfg.dt),
                 params.tau * cfg.dt, ensemble.step_count)
    return replace(ensemble, wealths=x, time=ensemble.time + 1.0,
                   step_count=ensemble.step_count + k)


Schedule = Union[ModelParams, Mapping[int, ModelParams], Callable[[int], ModelParams]]


def _resolve(schedule: Schedule, year: int) -> ModelParams:
    if isinstance(schedule, ModelParams):
        return schedule
    if isinstance(schedule, Mapping):
        try:
            return schedule[year]
        except KeyError:
            raise InvalidStateError(f"parameter schedule has no entry for year {year}") from None
    return schedule(year)


def simulate_years(ensemble: Ensemble, schedule: Schedule, n_years: int,
                   cfg: StepConfig = StepConfig(),
                   observer: Optional[Callable[[Ensemble], None]] = None) -> Ensemble:
    """Propagate ``n_years`` whole years.

    ``schedule`` maps the calendar year being traversed (the integer part of
    the time at its start) to the parameters used during that year.  The
    observer, if any, receives a read-only ensemble after every year.
    """
    if n_years < 0:
        raise InvalidStateError(f"n_years must be >= 0, got {n_years}")
    for _ in range(n_years):
        ensemble = propagate_year(ensemble, _resolve(schedule, ensemble.year), cfg)
        if observer is not None:
            observer(ensemble.readonly())
    return ensemble
