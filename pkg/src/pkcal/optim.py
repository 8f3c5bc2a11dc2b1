"""Multi-start bounded Nelder-Mead."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .errors import OptimizationError


@dataclass(frozen=True)
class OptimizerSettings:
    starts: int | None = None  # None -> max(8, 4q)
    max_iters: int = 2000
    x_tol: float = 1e-9
    f_tol: float = 1e-14

    def n_starts(self, q):
        return self.starts if self.starts is not None else max(8, 4 * q)


def start_points(lower, upper, count, seed):
    """Scrambled Halton points in the box, reproducible from ``seed``."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if count <= 0:
        return np.zeros((0, len(lower)))
    u = qmc.Halton(d=len(lower), scramble=True, seed=seed).random(count)
    return lower + (upper - lower) * u


def _initial_simplex(x0, lower, upper, frac=0.1):
    q = len(x0)
    sim = np.tile(x0, (q + 1, 1))
    step = frac * (upper - lower)
    for i in range(q):
        v = x0[i] + step[i]
        if v > upper[i]:
            v = x0[i] - step[i]
        sim[i + 1, i] = v
    return sim


def multistart_minimize(fun, lower, upper, starts, settings: OptimizerSettings):
    """Run Nelder-Mead from every start; return ``(x, f, trace)`` of the best converged run.

    Ties are broken by start order, so results are reproducible.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    bounds = list(zip(lower, upper))
    trace = []
    best = None
    for k, x0 in enumerate(np.atleast_2d(starts)):
        x0 = np.clip(np.asarray(x0, dtype=float), lower, upper)
        res = minimize(fun, x0, method="Nelder-Mead", bounds=bounds,
                       options={"maxiter": settings.max_iters, "maxfev": 4 * settings.max_iters,
                                "xatol": settings.x_tol, "fatol": settings.f_tol,
                                "initial_simplex": _initial_simplex(x0, lower, upper)})
        x = np.clip(res.x, lower, upper)
        f = float(res.fun)
        ok = bool(res.success) and np.isfinite(f)
        trace.append({"start": x0.tolist(), "x": x.tolist(), "f": f, "nfev": int(res.nfev),
                      "converged": ok})
        if ok and (best is None or f < best[1]):
            best = (x, f)
    if best is None:
        raise OptimizationError("no optimizer start converged", trace)
    return best[0], best[1], trace
