"""Stationary positive definite kernels and their spectral densities.

All families are parameterised so that ``K(x, x) = variance`` and use the
scaled distance ``r^2 = sum_j ((s_j - t_j) / l_j)^2``. The Fourier
convention is ``R(x) = int S(w) exp(i w.x) dw``, so ``int S = R(0)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .domain import as_points
from .errors import ValidationError

GAUSSIAN = "gaussian"
MATERN12 = "matern-1/2"
MATERN32 = "matern-3/2"
MATERN52 = "matern-5/2"
FAMILIES = (GAUSSIAN, MATERN12, MATERN32, MATERN52)

_NU = {MATERN12: 0.5, MATERN32: 1.5, MATERN52: 2.5}
_SQRT3 = np.sqrt(3.0)
_SQRT5 = np.sqrt(5.0)


@dataclass(frozen=True)
class KernelSpec:
    family: str
    lengthscales: tuple
    variance: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown kernel family {self.family!r}; choose from {list(FAMILIES)}")
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if ls.ndim != 1 or not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise ValidationError(f"kernel lengthscales must be positive, got {self.lengthscales!r}")
        if not (np.isfinite(self.variance) and self.variance > 0):
            raise ValidationError(f"kernel variance must be positive, got {self.variance!r}")
        object.__setattr__(self, "lengthscales", tuple(float(v) for v in ls))
        object.__setattr__(self, "variance", float(self.variance))

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    def to_dict(self):
        return {"family": self.family, "lengthscales": list(self.lengthscales), "variance": self.variance}


def radial(family: str, r, variance=1.0):
    """Kernel value as a function of the scaled distance ``r >= 0``."""
    r = np.asarray(r, dtype=float)
    if family == GAUSSIAN:
        out = np.exp(-0.5 * r * r)
    elif family == MATERN12:
        out = np.exp(-r)
    elif family == MATERN32:
        a = _SQRT3 * r
        out = (1.0 + a) * np.exp(-a)
    elif family == MATERN52:
        a = _SQRT5 * r
        out = (1.0 + a + a * a / 3.0) * np.exp(-a)
    else:
        raise ValidationError(f"unknown kernel family {family!r}")
    return variance * out


def _r(spec, s, t):
    # shared by kernel_eval and kernel_matrix so both round identically
    return np.sqrt(np.sum(((s - t) / np.asarray(spec.lengthscales)) ** 2, axis=-1))


def kernel_eval(spec: KernelSpec, s, t) -> float:
    s = np.asarray(s, dtype=float).reshape(-1)
    t = np.asarray(t, dtype=float).reshape(-1)
    if s.shape != (spec.dim,) or t.shape != (spec.dim,):
        raise ValidationError(f"points must have dimension {spec.dim}, got {s.shape} and {t.shape}")
    return float(radial(spec.family, _r(spec, s, t), spec.variance))


def kernel_matrix(spec: KernelSpec, X, Y=None, chunk=512) -> np.ndarray:
    """``K[i, j] = kernel_eval(spec, X[i], Y[j])``."""
    X = as_points(X, spec.dim)
    Y = X if Y is None else as_points(Y, spec.dim)
    out = np.empty((len(X), len(Y)))
    for i in range(0, len(X), chunk):
        r = _r(spec, X[i:i + chunk, None, :], Y[None, :, :])
        out[i:i + chunk] = radial(spec.family, r, spec.variance)
    return out


def spectral_density(spec: KernelSpec, omega) -> np.ndarray:
    """Fourier transform of the kernel at frequency ``omega`` (shape ``(d,)`` or ``(k, d)``)."""
    w = np.asarray(omega, dtype=float)
    single = w.ndim == 0 or (w.ndim == 1 and w.size == spec.dim)
    w = w.reshape(-1, spec.dim) if w.size % spec.dim == 0 and w.ndim <= 2 else None
    if w is None or w.shape[1] != spec.dim:
        raise ValidationError(f"frequency must have dimension {spec.dim}, got shape {np.shape(omega)}")
    ls = np.asarray(spec.lengthscales)
    d = spec.dim
    u2 = np.sum((w * ls) ** 2, axis=1)
    jac = np.prod(ls)
    if spec.family == GAUSSIAN:
        s_iso = (2 * np.pi) ** (-d / 2) * np.exp(-0.5 * u2)
    else:
        nu = _NU[spec.family]
        log_c = (gammaln(nu + d / 2) - gammaln(nu) - (d / 2) * np.log(np.pi) + nu * np.log(2 * nu))
        s_iso = np.exp(log_c - (nu + d / 2) * np.log(2 * nu + u2))
    out = spec.variance * jac * s_iso
    return float(out[0]) if single else out
