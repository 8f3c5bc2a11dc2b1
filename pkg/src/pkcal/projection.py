"""Projected kernels ``K_G`` and the L2 projection operators they are built from.

Every integral over the domain is taken with one :class:`QuadratureRule`, so
the discrete identities (annihilation of G, orthogonality of the range)
hold to rounding error rather than to quadrature error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse.linalg import eigsh

from .domain import QuadratureRule, as_points, gram_schmidt_l2
from .errors import DegenerateError, ValidationError
from .kernel import KernelSpec, kernel_matrix


@dataclass(frozen=True)
class SubspaceBasis:
    """An L2-orthonormal basis ``e_i = sum_k ortho_coeffs[i, k] g_k``.

    ``raw_funcs`` is a list of vectorised callables ``g_k(X) -> (n,)``.
    """

    raw_funcs: tuple
    ortho_coeffs: np.ndarray
    gram: np.ndarray
    dropped: tuple = ()

    @property
    def rank(self) -> int:
        return self.ortho_coeffs.shape[0]

    def raw_values(self, X) -> np.ndarray:
        return np.array([np.asarray(g(X), dtype=float).reshape(-1) for g in self.raw_funcs])

    def values(self, X) -> np.ndarray:
        """``(rank, n)`` array of orthonormal basis values at ``X``."""
        if self.rank == 0:
            return np.zeros((0, len(X)))
        return self.ortho_coeffs @ self.raw_values(X)


def subspace_basis(funcs, rule: QuadratureRule, rank_tol=1e-10, allow_empty=True,
                   raw_at_nodes=None) -> SubspaceBasis:
    """Orthonormalize ``funcs`` on ``rule``; a null span gives a rank-0 basis."""
    funcs = tuple(funcs)
    G = np.array([np.asarray(g(rule.nodes), dtype=float).reshape(-1) for g in funcs]) \
        if raw_at_nodes is None else np.asarray(raw_at_nodes, dtype=float)
    if len(funcs) == 0:
        return SubspaceBasis(funcs, np.zeros((0, 0)), np.zeros((0, 0)))
    gram = (G * rule.weights) @ G.T
    try:
        ob = gram_schmidt_l2(G, rule, rank_tol)
    except DegenerateError:
        if not allow_empty:
            raise
        return SubspaceBasis(funcs, np.zeros((0, len(funcs))), gram, tuple(range(len(funcs))))
    return SubspaceBasis(funcs, ob.coeffs, gram, ob.dropped)


@dataclass(frozen=True)
class ProjectedKernel:
    base: KernelSpec
    basis: SubspaceBasis
    rule: QuadratureRule
    node_basis: np.ndarray
    M: np.ndarray
    kq: np.ndarray = field(repr=False)

    @property
    def rank(self) -> int:
        return self.basis.rank

    @cached_property
    def weighted_basis(self) -> np.ndarray:
        return self.node_basis * self.rule.weights

    @cached_property
    def rho_max_estimate(self) -> float:
        """Largest Nystrom eigenvalue of the integral operator of the base kernel."""
        return nystrom_top_eigenvalue(self.kq, self.rule.weights)

    def h(self, Y, kqy=None) -> np.ndarray:
        """``h_i(t) = int K(x, t) e_i(x) dx`` at the rows of ``Y``, shape ``(rank, n)``."""
        if kqy is None:
            kqy = kernel_matrix(self.base, self.rule.nodes, Y)
        return self.weighted_basis @ kqy


def nystrom_top_eigenvalue(kq, weights) -> float:
    sw = np.sqrt(weights)
    A = kq * sw[:, None] * sw[None, :]
    if len(A) <= 600:
        return float(np.linalg.eigvalsh(A)[-1])
    return float(eigsh(A, k=1, which="LA", return_eigenvectors=False)[0])


def project_kernel(kernel: KernelSpec, basis: SubspaceBasis, rule: QuadratureRule,
                   kq=None, node_basis=None) -> ProjectedKernel:
    """Cache the node values of the basis and the double integrals ``M``.

    ``kq`` (the kernel on the quadrature nodes) depends only on the kernel
    and the rule, so callers that project repeatedly should pass it in.
    """
    if kernel.dim != rule.domain.dim:
        raise ValidationError(f"kernel dimension {kernel.dim} does not match domain dimension {rule.domain.dim}")
    if kq is None:
        kq = kernel_matrix(kernel, rule.nodes)
    if node_basis is None:
        node_basis = basis.values(rule.nodes)
    EW = node_basis * rule.weights
    M = EW @ kq @ EW.T
    M = 0.5 * (M + M.T)
    return ProjectedKernel(kernel, basis, rule, node_basis, M, kq)


def _check_inside(pk, X, what):
    X = as_points(X, pk.base.dim)
    if not pk.rule.domain.contains(X).all():
        raise ValidationError(f"{what} lies outside the domain; projected kernels are only defined on it")
    return X


def pk_cross(pk: ProjectedKernel, X, Y, kxy=None, kqx=None, kqy=None, ex=None, ey=None) -> np.ndarray:
    """``K_G(X_i, Y_j)``; optional precomputed kernel blocks skip recomputation."""
    X = _check_inside(pk, X, "point")
    Y = _check_inside(pk, Y, "point")
    K = kernel_matrix(pk.base, X, Y) if kxy is None else kxy
    if pk.rank == 0:
        return K
    ex = pk.basis.values(X) if ex is None else ex
    ey = pk.basis.values(Y) if ey is None else ey
    hx = pk.h(X, kqx)
    hy = pk.h(Y, kqy)
    return K - ex.T @ hy - hx.T @ ey + ex.T @ pk.M @ ey


def pk_eval(pk: ProjectedKernel, s, t) -> float:
    s = np.asarray(s, dtype=float).reshape(1, -1)
    t = np.asarray(t, dtype=float).reshape(1, -1)
    return float(pk_cross(pk, s, t)[0, 0])


def check_distinct(X):
    X = np.asarray(X, dtype=float)
    order = np.lexsort(X.T[::-1])
    Xs = X[order]
    same = np.all(Xs[1:] == Xs[:-1], axis=1)
    if same.any():
        k = int(np.flatnonzero(same)[0])
        i, j = sorted((int(order[k]), int(order[k + 1])))
        raise ValidationError(f"duplicate design points at indices {i} and {j}")


def pk_matrix(pk: ProjectedKernel, X, kxx=None, kqx=None, ex=None) -> np.ndarray:
    """Symmetric gram matrix ``(K_G(x_i, x_j))``."""
    X = _check_inside(pk, X, "point")
    check_distinct(X)
    K = kernel_matrix(pk.base, X) if kxx is None else kxx
    if pk.rank == 0:
        return K
    ex = pk.basis.values(X) if ex is None else ex
    C = ex.T @ pk.h(X, kqx)
    out = K - C - C.T + ex.T @ pk.M @ ex
    return 0.5 * (out + out.T)


def pk_matrix_nodes(pk: ProjectedKernel) -> np.ndarray:
    """``K_G`` on the quadrature nodes themselves (nodes are distinct by construction)."""
    if pk.rank == 0:
        return pk.kq
    E = pk.node_basis
    C = E.T @ (pk.weighted_basis @ pk.kq)
    out = pk.kq - C - C.T + E.T @ pk.M @ E
    return 0.5 * (out + out.T)


def kappa_apply(u, f, rule: QuadratureRule, at) -> np.ndarray:
    """``(kappa(u, f))(t) = int u(t, y) f(y) dy`` at the rows of ``at``.

    ``u`` is a :class:`KernelSpec` or a :class:`ProjectedKernel`.
    """
    fv = np.asarray(f(rule.nodes) if callable(f) else f, dtype=float).reshape(rule.size)
    if isinstance(u, ProjectedKernel):
        U = pk_cross(u, at, rule.nodes, kqy=u.kq if rule is u.rule else None)
    else:
        U = kernel_matrix(u, at, rule.nodes)
    return U @ (rule.weights * fv)


def project_l2(f, basis: SubspaceBasis, rule: QuadratureRule):
    """``(P_G f, P_G^perp f)`` as vectorised callables, plus the coefficients."""
    fv = np.asarray(f(rule.nodes), dtype=float).reshape(rule.size)
    E = basis.values(rule.nodes)
    coeffs = (E * rule.weights) @ fv

    def proj(X):
        return coeffs @ basis.values(X)

    def perp(X):
        return np.asarray(f(X), dtype=float).reshape(-1) - proj(X)

    proj.coeffs = coeffs
    return proj, perp


@dataclass(frozen=True)
class NormProbe:
    lhs: float
    rhs_base: float
    ratio: float


def norm_inequality_probe(pk: ProjectedKernel, h, rule: QuadratureRule | None = None) -> NormProbe:
    """Discrete ``||P^perp kappa(K,h)||_{N(K_G)}`` against ``||kappa(K,h)||_{N(K)}``.

    Both squared norms reduce to quadratic forms ``h_w^T A h_w`` with the
    weight-scaled node vector ``h_w``; only the projection's own rule is supported.
    """
    if rule is not None and rule is not pk.rule:
        raise ValidationError("the probe must use the rule the projected kernel was built on")
    rule = pk.rule
    hv = np.asarray(h(rule.nodes) if callable(h) else h, dtype=float).reshape(rule.size)
    hw = rule.weights * hv
    rhs2 = float(hw @ pk.kq @ hw)
    if not rhs2 > 0:
        raise DegenerateError("base quadratic form is not positive; h is numerically zero")
    # h_w^T K_G h_w equals the base form at the weighted perpendicular part; this
    # avoids square-rooting cancellation error when h is (nearly) in G
    pw = rule.weights * (hv - pk.node_basis.T @ (pk.weighted_basis @ hv)) if pk.rank else hw
    lhs = float(np.sqrt(max(float(pw @ pk.kq @ pw), 0.0)))
    rhs = float(np.sqrt(rhs2))
    return NormProbe(lhs, rhs, lhs / rhs)


def norm_bound_constant(pk: ProjectedKernel, rel_cutoff=1e-12) -> float:
    """Nystrom estimate of ``1 + sup ||g||_{N(K)} ||kappa(K,g)||_{N(K)}`` over unit g in G.

    The supremum of the product of the two quadratic forms is bounded above by
    the product of their largest eigenvalues on G (exact when rank is 1).
    Eigenvalues below ``rel_cutoff * rho_max`` are discarded.
    """
    if pk.rank == 0:
        return 1.0
    sw = np.sqrt(pk.rule.weights)
    A = pk.kq * sw[:, None] * sw[None, :]
    rho, V = np.linalg.eigh(A)
    keep = rho > rel_cutoff * rho[-1]
    rho, V = rho[keep], V[:, keep]
    U = pk.node_basis.T * sw[:, None]  # orthonormal columns spanning G
    C = V.T @ U
    native = C.T @ (C / rho[:, None])
    image = C.T @ (C * rho[:, None])
    top = np.linalg.eigvalsh(native)[-1] * np.linalg.eigvalsh(image)[-1]
    return 1.0 + float(np.sqrt(max(top, 0.0)))


def project_first_argument(U, pk: ProjectedKernel) -> np.ndarray:
    """Discretised L2 projection onto G in the first argument of a node-grid kernel ``U``."""
    return pk.node_basis.T @ (pk.weighted_basis @ U)


def project_second_argument(U, pk: ProjectedKernel) -> np.ndarray:
    return (U @ pk.weighted_basis.T) @ pk.node_basis
