"""Inequality measures: top-q wealth share, Gini coefficient, Lorenz curve,
and discrepancies between a model wealth vector and observed share data.

All functions work on a scratch copy and never mutate their input.  Negative
wealths are allowed everywhere; the measures are computed as defined and may
leave their textbook ranges (e.g. a Gini above 1), which is reported through
:class:`~rgbm.errors.NegativeWealthWarning`.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np
from scipy.special import ndtri

from .errors import (
    CoarseShareWarning,
    DegenerateTotalError,
    InvalidStateError,
    NegativeWealthWarning,
    UsageError,
    ValidationError,
)

__all__ = [
    "ShareTarget",
    "LorenzCurve",
    "Measure",
    "top_count",
    "top_share",
    "gini",
    "lorenz",
    "lorenz_points",
    "gini_from_lorenz_points",
    "reference_quantiles",
    "share_discrepancy",
]


@dataclass(frozen=True)
class ShareTarget:
    """Fraction ``share`` of total wealth owned by the richest fraction ``q``."""

    q: float
    share: float

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ValidationError(f"q must lie in (0, 1), got {self.q}")
        if not math.isfinite(self.share):
            raise ValidationError(f"share must be finite, got {self.share}")


@dataclass(frozen=True)
class LorenzCurve:
    p: np.ndarray
    L: np.ndarray

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.p.tolist(), self.L.tolist()))

    def is_convex(self, tol: float = 1e-12) -> bool:
        slopes = np.diff(self.L) / np.diff(self.p)
        return bool(np.all(np.diff(slopes) >= -tol))


class Measure(str, enum.Enum):
    TOP_SHARE_ABS = "top_share_abs"
    GINI_ABS = "gini_abs"
    LORENZ_SUP = "lorenz_sup"
    KS = "ks"


def _as_vector(wealths) -> np.ndarray:
    x = np.asarray(wealths, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidStateError(f"expected a 1-D wealth vector, got shape {x.shape}")
    return x


def _total(x: np.ndarray) -> float:
    total = float(np.sum(x))
    if total == 0.0:
        raise DegenerateTotalError("total wealth is zero; shares are undefined")
    return total


def top_count(n: int, q: float) -> int:
    """Number of agents in the top fraction ``q``: round half up, at least one."""
    return max(1, int(math.floor(q * n + 0.5)))


def top_share(wealths, q: float) -> float:
    """Share of total wealth held by the richest ``round(q N)`` agents."""
    x = _as_vector(wealths)
    n = x.size
    if n == 0:
        raise InvalidStateError("top share of an empty wealth vector")
    if not 0.0 < q < 1.0:
        raise UsageError(f"q must lie in (0, 1), got {q}")
    if q * n < 1.0:
        warnings.warn(f"q*N = {q * n:.3g} < 1; using the single richest agent",
                      CoarseShareWarning, stacklevel=2)
    total = _total(x)
    k = top_count(n, q)
    top = np.partition(x, n - k)[n - k:]
    return float(np.sum(top) / total)


def gini(wealths) -> float:
    """Gini coefficient via the sorted-rank identity, O(N log N).

    Equal to ``sum_ij |x_i - x_j| / (2 N^2 mean)``.
    """
    x = _as_vector(wealths)
    n = x.size
    if n < 2:
        raise InvalidStateError(f"gini needs at least 2 agents, got {n}")
    total = _total(x)
    xs = np.sort(x)
    ranks = np.arange(1, n + 1, dtype=np.float64)
    g = float(np.sum((2.0 * ranks - n - 1.0) * xs) / (n * total))
    if g > 1.0:
        warnings.warn(f"gini = {g:.6g} exceeds 1 because of negative wealths",
                      NegativeWealthWarning, stacklevel=2)
    return g


def lorenz(wealths) -> LorenzCurve:
    x = _as_vector(wealths)
    n = x.size
    if n == 0:
        raise InvalidStateError("Lorenz curve of an empty wealth vector")
    total = _total(x)
    xs = np.sort(x, kind="stable")
    L = np.concatenate(([0.0], np.cumsum(xs) / total))
    L[-1] = 1.0
    p = np.arange(n + 1, dtype=np.float64) / n
    return LorenzCurve(p=p, L=L)


def _targets(data) -> list[ShareTarget]:
    if isinstance(data, ShareTarget):
        return [data]
    return list(data)


def lorenz_points(data: Union[ShareTarget, Iterable[ShareTarget]]) -> LorenzCurve:
    """Lorenz nodes implied by share data, with (0,0) and (1,1) appended."""
    targets = sorted(_targets(data), key=lambda t: -t.q)
    p = [0.0] + [1.0 - t.q for t in targets] + [1.0]
    L = [0.0] + [1.0 - t.share for t in targets] + [1.0]
    if np.any(np.diff(p) <= 0):
        raise ValidationError("share data contain duplicate q values")
    return LorenzCurve(p=np.array(p), L=np.array(L))


def gini_from_lorenz_points(curve: LorenzCurve) -> float:
    """Gini from a piecewise-linear Lorenz curve (trapezoid rule)."""
    area = float(np.sum(np.diff(curve.p) * (curve.L[1:] + curve.L[:-1])) / 2.0)
    return 1.0 - 2.0 * area


def reference_quantiles(data: Iterable[ShareTarget]) -> tuple[np.ndarray, np.ndarray]:
    """Mean-normalised wealth quantiles implied by share data.

    The data Lorenz curve is interpolated as ``L(p) = Phi(Phi^-1(p) - s(p))``,
    the lognormal Lorenz family with a dispersion ``s(p)`` that is linear in
    ``p`` between nodes (constant beyond the outermost ones), so every pair of
    adjacent nodes is joined by a lognormal arc through both of them.  The
    quantile at a node is ``dL/dp``, with the one-sided slopes of ``s``
    averaged.  Returns ``(p_nodes, y_nodes)``.
    """
    curve = lorenz_points(data)
    p, L = curve.p[1:-1], curve.L[1:-1]
    if np.any(L <= 0.0) or np.any(L >= 1.0):
        raise ValidationError("KS reference needs every share strictly inside (q, 1)")
    z = ndtri(p)
    s = z - ndtri(L)
    if p.size == 1:
        ds = np.zeros(1)
    else:
        seg = np.diff(s) / np.diff(p)
        left = np.concatenate(([0.0], seg))
        right = np.concatenate((seg, [0.0]))
        ds = 0.5 * (left + right)
    phi = lambda u: np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
    y = phi(z - s) * (1.0 / phi(z) - ds)
    if np.any(y <= 0.0) or np.any(np.diff(y) <= 0.0):
        raise ValidationError("share data do not define an increasing reference quantile function")
    return p, y


def _top_shares_sorted(xs_desc_cumsum: np.ndarray, total: float, qs: Sequence[float]) -> np.ndarray:
    n = xs_desc_cumsum.size
    return np.array([xs_desc_cumsum[top_count(n, q) - 1] / total for q in qs])


def share_discrepancy(wealths, data: Union[ShareTarget, Iterable[ShareTarget]],
                      measure: Union[Measure, str] = Measure.TOP_SHARE_ABS) -> float:
    """Distance between a model wealth vector and observed share data."""
    measure = Measure(measure)
    targets = _targets(data)
    if not targets:
        raise UsageError(f"measure {measure.value} needs at least one share target")
    if measure is Measure.TOP_SHARE_ABS:
        if len(targets) != 1:
            raise UsageError(f"top_share_abs takes exactly one target, got {len(targets)}")
        t = targets[0]
        return abs(top_share(wealths, t.q) - t.share)

    x = _as_vector(wealths)
    if measure is Measure.GINI_ABS:
        return abs(gini(x) - gini_from_lorenz_points(lorenz_points(targets)))

    total = _total(x)
    if measure is Measure.LORENZ_SUP:
        desc = np.cumsum(np.sort(x)[::-1])
        qs = [t.q for t in targets]
        model = _top_shares_sorted(desc, total, qs)
        return float(np.max(np.abs(model - np.array([t.share for t in targets]))))

    p, y = reference_quantiles(targets)
    rel = np.sort(x / (total / x.size))
    cdf = np.searchsorted(rel, y, side="right") / x.size
    return float(np.max(np.abs(cdf - p)))
