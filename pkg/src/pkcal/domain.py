"""Hyperrectangular experimental regions and quadrature-backed L2 structure."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.stats import qmc

from .errors import DegenerateError, NumericError, ResourceError, ValidationError

DEFAULT_NODE_BUDGET = 200_000
TENSOR_GAUSS = "tensor-gauss"
SOBOL_QMC = "sobol-qmc"


@dataclass(frozen=True)
class DomainSpec:
    """A closed box ``prod_j [a_j, b_j]``."""

    bounds: tuple

    def __post_init__(self):
        b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if len(b) == 0:
            raise ValidationError("domain needs at least one dimension")
        for j, (lo, hi) in enumerate(b):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValidationError(f"domain bound {j} must satisfy a < b, got [{lo}, {hi}]")
        object.__setattr__(self, "bounds", b)

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.bounds])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.bounds])

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def contains(self, X, tol=1e-12) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        slack = tol * (self.upper - self.lower)
        return np.all((X >= self.lower - slack) & (X <= self.upper + slack), axis=1)

    def check_points(self, X, what="point"):
        X = as_points(X, self.dim)
        inside = self.contains(X)
        if not inside.all():
            bad = np.flatnonzero(~inside)
            raise ValidationError(f"{what} outside the domain at indices {bad[:10].tolist()}")
        return X

    def uniform(self, rng, n) -> np.ndarray:
        return self.lower + (self.upper - self.lower) * rng.random((n, self.dim))


def as_points(X, dim) -> np.ndarray:
    """Coerce ``X`` to an ``(n, dim)`` float array."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X.reshape(-1, 1) if dim == 1 else X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != dim:
        raise ValidationError(f"expected points of dimension {dim}, got array of shape {np.shape(X)}")
    return X


@dataclass(frozen=True)
class QuadratureRule:
    kind: str
    nodes: np.ndarray
    weights: np.ndarray
    level: int
    domain: DomainSpec = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.weights)

    def integrate(self, f, normalized=False) -> float:
        """Integral of ``f`` over the domain; ``normalized`` divides by the volume."""
        vals = _values_at_nodes(f, self)
        total = float(self.weights @ vals)
        return total / self.domain.volume if normalized else total


def build_quadrature(domain: DomainSpec, kind: str | None = None, level: int = 32,
                     node_budget: int = DEFAULT_NODE_BUDGET, seed: int = 0) -> QuadratureRule:
    """Tensor Gauss-Legendre (exact to per-axis degree ``2*level-1``) or Sobol QMC.

    For ``sobol-qmc`` the rule has ``2**level`` equally weighted scrambled
    Sobol points. ``kind=None`` picks tensor-gauss for ``d <= 3``.
    """
    if kind is None:
        kind = TENSOR_GAUSS if domain.dim <= 3 else SOBOL_QMC
    if int(level) != level or level < 1:
        raise ValidationError(f"quadrature level must be an integer >= 1, got {level}")
    level = int(level)
    lo, hi = domain.lower, domain.upper
    if kind == TENSOR_GAUSS:
        n_nodes = level ** domain.dim
        if n_nodes > node_budget:
            raise ResourceError(
                f"tensor-gauss rule needs {n_nodes} nodes, above the node budget of {node_budget}")
        t, w = leggauss(level)
        axes = [(lo[j] + hi[j]) / 2 + (hi[j] - lo[j]) / 2 * t for j in range(domain.dim)]
        axw = [(hi[j] - lo[j]) / 2 * w for j in range(domain.dim)]
        nodes = np.array(list(itertools.product(*axes)))
        weights = np.array([np.prod(c) for c in itertools.product(*axw)])
    elif kind == SOBOL_QMC:
        n_nodes = 2 ** level
        if n_nodes > node_budget:
            raise ResourceError(
                f"sobol-qmc rule needs {n_nodes} nodes, above the node budget of {node_budget}")
        u = qmc.Sobol(d=domain.dim, scramble=True, seed=seed).random_base2(level)
        nodes = lo + (hi - lo) * u
        weights = np.full(n_nodes, domain.volume / n_nodes)
    else:
        raise ValidationError(f"unknown quadrature kind {kind!r}; expected {TENSOR_GAUSS!r} or {SOBOL_QMC!r}")
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(kind, nodes, weights, level, domain)


def _values_at_nodes(f, rule: QuadratureRule) -> np.ndarray:
    if callable(f):
        vals = np.asarray(f(rule.nodes), dtype=float)
        if vals.ndim == 0:
            vals = np.full(rule.size, float(vals))
    else:
        vals = np.asarray(f, dtype=float)
    vals = vals.reshape(rule.size)
    bad = ~np.isfinite(vals)
    if bad.any():
        q = int(np.flatnonzero(bad)[0])
        raise NumericError(f"non-finite function value at quadrature node {q}: {rule.nodes[q].tolist()}")
    return vals


def l2_inner(f, g, rule: QuadratureRule, normalized=False) -> float:
    """``sum_q w_q f(x_q) g(x_q)``; ``f``/``g`` are callables or node values."""
    total = float(rule.weights @ (_values_at_nodes(f, rule) * _values_at_nodes(g, rule)))
    return total / rule.domain.volume if normalized else total


def l2_norm(f, rule: QuadratureRule, normalized=False) -> float:
    return float(np.sqrt(max(l2_inner(f, f, rule, normalized), 0.0)))


@dataclass(frozen=True)
class OrthonormalBasis:
    """``e_i = sum_k coeffs[i, k] g_k`` with ``kept``/``dropped`` input indices."""

    coeffs: np.ndarray
    kept: tuple
    dropped: tuple

    @property
    def rank(self) -> int:
        return self.coeffs.shape[0]


def gram_schmidt_l2(funcs, rule: QuadratureRule, rank_tol: float = 1e-10) -> OrthonormalBasis:
    """Weighted modified Gram-Schmidt with one reorthogonalization pass.

    ``funcs`` is a sequence of callables, or an ``(m, Q)`` array of node values.
    A direction whose residual norm is below ``rank_tol`` times the largest
    input norm is dropped.
    """
    if callable(funcs) or (not isinstance(funcs, np.ndarray) and len(funcs) == 0):
        raise ValidationError("gram_schmidt_l2 needs a non-empty list of functions")
    if isinstance(funcs, np.ndarray):
        G = np.atleast_2d(np.asarray(funcs, dtype=float))
    else:
        G = np.array([_values_at_nodes(f, rule) for f in funcs])
    m = G.shape[0]
    if m == 0:
        raise ValidationError("gram_schmidt_l2 needs a non-empty list of functions")
    if not np.all(np.isfinite(G)):
        raise NumericError("non-finite basis function values at quadrature nodes")
    w = rule.weights
    sw = np.sqrt(w)
    V = G * sw  # rows are functions in the weighted Euclidean geometry
    norms = np.linalg.norm(V, axis=1)
    scale = norms.max()
    if not scale > 0:
        raise DegenerateError("all subspace functions are numerically zero")
    Q = []
    C = []
    kept, dropped = [], []
    for k in range(m):
        v = V[k].copy()
        c = np.zeros(m)
        c[k] = 1.0
        for _ in range(2):
            for qi, ci in zip(Q, C):
                proj = qi @ v
                v -= proj * qi
                c -= proj * ci
        nv = np.linalg.norm(v)
        if nv <= rank_tol * scale:
            dropped.append(k)
            continue
        Q.append(v / nv)
        C.append(c / nv)
        kept.append(k)
    return OrthonormalBasis(np.array(C), tuple(kept), tuple(dropped))
