"""Nelder-Mead minimisation of a scalar function of one bounded variable.

The simplex is a pair of points.  Reflection, expansion, contraction and
shrink follow the standard algorithm (coefficients 1, 2, 1/2, 1/2); trial
points are clipped into ``bounds``.  If the simplex fails to meet ``xtol``
within ``max_iter`` iterations, or collapses below ``degenerate_width``
without converging, a golden-section search over ``bounds`` takes over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

__all__ = ["MinimizeResult", "nelder_mead_1d", "golden_section"]

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class MinimizeResult:
    x: float
    fun: float
    n_evals: int
    n_iter: int
    converged: bool
    boundary_hit: bool
    used_fallback: bool


class _Counted:
    def __init__(self, f: Callable[[float], float]):
        self.f = f
        self.cache: dict[float, float] = {}

    def __call__(self, x: float) -> float:
        if x not in self.cache:
            self.cache[x] = float(self.f(x))
        return self.cache[x]


def golden_section(f: Callable[[float], float], lo: float, hi: float,
                   xtol: float = 1e-4, max_iter: int = 200) -> tuple[float, float, int]:
    """Minimise ``f`` on ``[lo, hi]``; returns ``(x, f(x), iterations)``."""
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    it = 0
    while b - a > xtol and it < max_iter:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
        it += 1
    return (c, fc, it) if fc <= fd else (d, fd, it)


def nelder_mead_1d(f: Callable[[float], float], x0: float = 0.0, x1: float = 0.05,
                   bounds: tuple[float, float] = (-1.0, 1.0), xtol: float = 1e-4,
                   max_iter: int = 200, degenerate_width: float = 1e-6) -> MinimizeResult:
    lo, hi = bounds
    if not lo < hi:
        raise ValueError(f"empty bounds {bounds}")
    clip = lambda x: min(max(x, lo), hi)
    fc = _Counted(f)

    a, b = clip(x0), clip(x1)
    if a == b:
        b = clip(a + 0.05 * (hi - lo)) if a < hi else clip(a - 0.05 * (hi - lo))
    best, worst = (a, b) if fc(a) <= fc(b) else (b, a)

    converged = False
    it = 0
    while it < max_iter:
        width = abs(worst - best)
        if width < xtol:
            converged = True
            break
        if width < degenerate_width:
            break
        it += 1
        fb, fw = fc(best), fc(worst)
        xr = clip(best + (best - worst))
        fr = fc(xr)
        if xr == best:
            # reflection clipped onto the bound: only an inside contraction is informative
            worst = best + 0.5 * (worst - best)
        elif fr < fb:
            xe = clip(best + 2.0 * (best - worst))
            fe = fc(xe)
            worst = xe if fe < fr else xr
        elif fr < fw:
            xoc = clip(best + 0.5 * (xr - best))
            worst = xoc if xoc != best and fc(xoc) <= fr else best + 0.5 * (worst - best)
        else:
            xic = best + 0.5 * (worst - best)
            # in one dimension the shrink step lands on the inside contraction point
            worst = xic
        if fc(worst) < fc(best):
            best, worst = worst, best

    used_fallback = False
    x, fx = best, fc(best)
    if not converged:
        # enough golden steps to shrink the full bracket below xtol
        n_golden = int(math.ceil(math.log(xtol / (hi - lo)) / math.log(_INV_PHI))) + 1
        gx, gf, _ = golden_section(fc, lo, hi, xtol=xtol, max_iter=max(n_golden, 1))
        used_fallback = True
        if gf < fx:
            x, fx = gx, gf
        converged = True
    boundary_hit = abs(x - lo) < xtol or abs(hi - x) < xtol
    return MinimizeResult(x=x, fun=fx, n_evals=len(fc.cache), n_iter=it, converged=converged,
                          boundary_hit=boundary_hit, used_fallback=used_fallback)
