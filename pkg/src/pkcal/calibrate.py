"""Calibration with projected kernels, plus the L2 and KO-mode baselines.

For fixed theta the inner penalised least-squares problem has the closed form

    alpha = (K_theta + n lam I)^{-1} r,    J(theta) = lam r^T (K_theta + n lam I)^{-1} r,

with ``r = y - y^s(X, theta)``; the outer search over theta is a multi-start
Nelder-Mead on ``J``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .domain import QuadratureRule
from .errors import DegenerateError, IllConditionedError, SingularityError, ValidationError
from .kernel import KernelSpec, kernel_matrix
from .model import ComputerModel
from .optim import OptimizerSettings, multistart_minimize, start_points
from .projection import (ProjectedKernel, check_distinct, pk_cross, project_kernel,
                         subspace_basis)

DEFAULT_LAMBDA_GRID = tuple(float(v) for v in 10.0 ** np.arange(-8.0, 0.25, 0.5))
MAX_JITTER_REL = 1e-6


@dataclass(frozen=True)
class LambdaPolicy:
    kind: str = "gcv"
    value: float | None = None
    grid: tuple = DEFAULT_LAMBDA_GRID

    def __post_init__(self):
        if self.kind not in ("gcv", "fixed"):
            raise ValidationError(f"lambda policy must be 'gcv' or 'fixed', got {self.kind!r}")
        if self.kind == "fixed" and not (self.value is not None and self.value > 0):
            raise ValidationError(f"fixed lambda must be positive, got {self.value!r}")
        if self.kind == "gcv" and (len(self.grid) == 0 or min(self.grid) <= 0):
            raise ValidationError("GCV grid must be non-empty and positive")

    @classmethod
    def fixed(cls, value):
        return cls("fixed", float(value))

    @classmethod
    def gcv(cls, grid=DEFAULT_LAMBDA_GRID):
        return cls("gcv", None, tuple(float(g) for g in grid))


class CalibrationProblem:
    """Data plus settings; read-only once built.

    Internally the data are held in a canonical (sorted) order so that the
    estimate does not depend on the order the observations were supplied in.
    """

    def __init__(self, X, y, model: ComputerModel, kernel: KernelSpec, rule: QuadratureRule,
                 lambda_policy: LambdaPolicy = LambdaPolicy(),
                 optimizer: OptimizerSettings = OptimizerSettings(),
                 jitter_rel: float = 1e-12, seed: int = 0, rank_tol: float = 1e-10):
        domain = rule.domain
        X = domain.check_points(X, "design point")
        y = np.asarray(y, dtype=float).reshape(-1)
        errors = []
        if len(y) != len(X):
            errors.append(f"X has {len(X)} rows but y has {len(y)} entries")
        if not np.all(np.isfinite(y)):
            errors.append("y contains non-finite values")
        if len(X) < model.q + 1:
            errors.append(f"need n >= q + 1 = {model.q + 1} observations, got {len(X)}")
        if model.dim != domain.dim or kernel.dim != domain.dim:
            errors.append(f"dimensions disagree: domain {domain.dim}, model {model.dim}, kernel {kernel.dim}")
        if errors:
            raise ValidationError("; ".join(errors))
        check_distinct(X)
        self.X, self.y = X, y
        self.model, self.kernel, self.rule = model, kernel, rule
        self.lambda_policy, self.optimizer = lambda_policy, optimizer
        self.jitter_rel, self.seed, self.rank_tol = float(jitter_rel), int(seed), float(rank_tol)
        self.order = np.lexsort(np.column_stack([X, y]).T[::-1])
        self.Xc = X[self.order]
        self.yc = y[self.order]
        self._kxx = self._kqx = self._kq = None
        self._pk_cache = {}

    @property
    def n(self) -> int:
        return len(self.y)

    # --- theta-independent kernel blocks ---------------------------------
    @property
    def kxx(self):
        if self._kxx is None:
            self._kxx = kernel_matrix(self.kernel, self.Xc)
        return self._kxx

    @property
    def kqx(self):
        if self._kqx is None:
            self._kqx = kernel_matrix(self.kernel, self.rule.nodes, self.Xc)
        return self._kqx

    @property
    def kq(self):
        if self._kq is None:
            self._kq = kernel_matrix(self.kernel, self.rule.nodes)
        return self._kq

    def with_lambda(self, lam):
        """Shallow copy sharing the kernel caches but using a fixed lambda."""
        other = object.__new__(CalibrationProblem)
        other.__dict__.update(self.__dict__)
        other.lambda_policy = LambdaPolicy.fixed(lam)
        return other

    # --- theta-dependent pieces ------------------------------------------
    def projected_kernel(self, theta) -> ProjectedKernel:
        theta = np.asarray(theta, dtype=float)
        key = None if self.model.theta_free_gradient else theta.tobytes()
        pk = self._pk_cache.get(key)
        if pk is None:
            basis = subspace_basis(self.model.sensitivity_funcs(theta), self.rule, self.rank_tol)
            pk = project_kernel(self.kernel, basis, self.rule, kq=self.kq)
            if key is not None and len(self._pk_cache) > 8:
                self._pk_cache.clear()
            self._pk_cache[key] = pk
        return pk

    def gram(self, theta, projected=True):
        """Canonical-order gram matrix at ``theta``, cached when theta-free."""
        if not projected:
            return self.kxx
        theta = np.asarray(theta, dtype=float)
        key = ("gram", None if self.model.theta_free_gradient else theta.tobytes())
        K = self._pk_cache.get(key)
        if K is None:
            pk = self.projected_kernel(theta)
            if pk.rank == 0:
                K = self.kxx
            else:
                ex = pk.basis.values(self.Xc)
                C = ex.T @ pk.h(self.Xc, self.kqx)
                K = self.kxx - C - C.T + ex.T @ pk.M @ ex
                K = 0.5 * (K + K.T)
            self._pk_cache[key] = K
        return K

    def residual(self, theta):
        return self.yc - self.model.eval(self.Xc, theta)

    def to_original(self, v):
        out = np.empty_like(v)
        out[self.order] = v
        return out


# ---------------------------------------------------------------------------
# linear algebra

def factor_shifted(K, shift, jitter_rel=1e-12, events=None):
    """Cholesky of ``K + shift I``, escalating diagonal jitter on failure."""
    A = K + shift * np.eye(len(K))
    scale = float(np.mean(np.diag(A)))
    jitter = 0.0
    while True:
        try:
            return cho_factor(A if jitter == 0 else A + jitter * scale * np.eye(len(A)), lower=True)
        except LinAlgError:
            jitter = jitter_rel if jitter == 0 else jitter * 10
            if events is not None:
                events.append({"jitter_rel": jitter})
            if jitter > MAX_JITTER_REL * (1 + 1e-9):
                cond = float(np.linalg.cond(A))
                raise IllConditionedError(
                    f"factorization failed after jitter {MAX_JITTER_REL:g}; condition estimate {cond:.3e}",
                    cond) from None


def logdet_from_factor(c):
    return 2.0 * float(np.sum(np.log(np.diag(c[0]))))


class _Profile:
    """``theta -> J(theta)`` at fixed lambda; caches the factor when the gram is theta-free."""

    def __init__(self, problem: CalibrationProblem, lam: float, projected=True):
        self.problem, self.lam, self.projected = problem, float(lam), projected
        self.events = []
        self._fixed = (not projected) or problem.model.theta_free_gradient
        self._factor = None

    def factor(self, theta):
        p = self.problem
        if self._fixed and self._factor is not None:
            return self._factor
        f = factor_shifted(p.gram(theta, self.projected), p.n * self.lam, p.jitter_rel, self.events)
        if self._fixed:
            self._factor = f
        return f

    def solve(self, theta):
        r = self.problem.residual(theta)
        alpha = cho_solve(self.factor(theta), r)
        return self.lam * float(r @ alpha), alpha

    def __call__(self, theta):
        if not self.problem.model.in_bounds(theta):
            return np.inf
        return self.solve(theta)[0]


def profile_objective(problem: CalibrationProblem, theta, lam, projected=True):
    """``(J, alpha)`` solving the inner minimisation over alpha exactly.

    ``alpha`` is returned in the caller's data order.
    """
    if not lam > 0:
        raise ValidationError(f"lambda must be positive, got {lam}")
    J, alpha = _Profile(problem, lam, projected).solve(np.asarray(theta, dtype=float))
    return J, problem.to_original(alpha)


# ---------------------------------------------------------------------------
# GCV

def _gcv_scores(K, r, grid):
    n = len(r)
    s, U = np.linalg.eigh(K)
    s = np.clip(s, 0.0, None)
    c2 = (U.T @ r) ** 2
    trace = []
    for lam in grid:
        shrink = n * lam / (s + n * lam)
        tr = float(np.sum(shrink))
        if not tr > 1e-12 * n:
            raise DegenerateError(f"trace(I - A) is numerically zero at lambda={lam:g}")
        rss = float(np.sum(shrink ** 2 * c2))
        trace.append((float(lam), n * rss / tr ** 2))
    return trace


def gcv_select(problem: CalibrationProblem, theta_pilot, grid=None, projected=True):
    """Grid-minimise the GCV score at ``theta_pilot``; returns ``(lam, trace)``."""
    grid = problem.lambda_policy.grid if grid is None else tuple(grid)
    if len(grid) == 0 or min(grid) <= 0:
        raise ValidationError("GCV grid must be non-empty and positive")
    K = problem.gram(theta_pilot, projected)
    trace = _gcv_scores(K, problem.residual(theta_pilot), grid)
    k = int(np.argmin([s for _, s in trace]))
    return trace[k][0], trace


def hat_trace(K, lam):
    """``trace(K (K + n lam I)^{-1})``."""
    s = np.clip(np.linalg.eigvalsh(K), 0.0, None)
    return float(np.sum(s / (s + len(K) * lam)))


# ---------------------------------------------------------------------------
# results

@dataclass
class CalibrationResult:
    method: str
    theta_hat: np.ndarray
    alpha_hat: np.ndarray
    lambda_used: float
    objective: float
    sigma2_hat: float
    ortho_residual: np.ndarray
    gcv_trace: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "method": self.method,
            "theta_hat": [float(v) for v in self.theta_hat],
            "lambda_used": self.lambda_used,
            "objective": self.objective,
            "sigma2_hat": self.sigma2_hat,
            "ortho_residual": [float(v) for v in self.ortho_residual],
            "gcv_trace": [[lam, s] for lam, s in self.gcv_trace],
            "alpha_hat": [float(v) for v in self.alpha_hat],
            "diagnostics": self.diagnostics,
        }


def _boundary_flags(model, theta, rel=1e-6):
    width = model.upper - model.lower
    return bool(np.any(theta - model.lower <= rel * width) or np.any(model.upper - theta <= rel * width))


def _starts(problem, extra):
    m = problem.model
    pts = start_points(m.lower, m.upper, problem.optimizer.n_starts(m.q), problem.seed)
    extra = [np.clip(np.asarray(e, dtype=float), m.lower, m.upper) for e in extra]
    return np.vstack(extra + [pts]) if extra else pts


def _ortho_residual(problem, theta, delta_at_nodes):
    G = problem.model.grad_theta(problem.rule.nodes, theta)
    return (problem.rule.weights * delta_at_nodes) @ G


# ---------------------------------------------------------------------------
# estimators

def _fit_l2_ridge(problem):
    K = problem.kxx
    y = problem.yc
    if problem.lambda_policy.kind == "fixed":
        lam, trace = problem.lambda_policy.value, []
    else:
        trace = _gcv_scores(K, y, problem.lambda_policy.grid)
        lam = trace[int(np.argmin([s for _, s in trace]))][0]
    events = []
    alpha = cho_solve(factor_shifted(K, problem.n * lam, problem.jitter_rel, events), y)
    return lam, trace, alpha, events


def fit_l2(problem: CalibrationProblem) -> CalibrationResult:
    """Kernel ridge smoothing with the full kernel, then an L2 projection of the smoother."""
    m, rule = problem.model, problem.rule
    lam, trace, alpha, events = _fit_l2_ridge(problem)
    zeta_nodes = problem.kqx @ alpha

    def dist(theta):
        if not m.in_bounds(theta):
            return np.inf
        d = zeta_nodes - m.eval(rule.nodes, theta)
        return float(rule.weights @ (d * d))

    theta, f, opt_trace = multistart_minimize(dist, m.lower, m.upper, _starts(problem, []), problem.optimizer)
    n = problem.n
    fitted = problem.kxx @ alpha
    tr = hat_trace(problem.kxx, lam)
    sigma2 = float(np.sum((problem.yc - fitted) ** 2) / max(n - tr, 1e-12))
    return CalibrationResult(
        method="l2", theta_hat=theta, alpha_hat=problem.to_original(alpha), lambda_used=float(lam),
        objective=f, sigma2_hat=sigma2,
        ortho_residual=_ortho_residual(problem, theta, zeta_nodes - m.eval(rule.nodes, theta)),
        gcv_trace=trace,
        diagnostics={"optimizer": opt_trace, "jitter_events": events,
                     "boundary_warning": _boundary_flags(m, theta)},
    )


def _fit_profile(problem, method, projected, lam, gcv_trace, pilot):
    m = problem.model
    prof = _Profile(problem, lam, projected)
    theta, J, opt_trace = multistart_minimize(prof, m.lower, m.upper, _starts(problem, [pilot]),
                                              problem.optimizer)
    passes = [{"lambda": lam, "theta": theta.tolist(), "objective": J}]
    if problem.lambda_policy.kind == "gcv" and projected:
        lam2, trace2 = gcv_select(problem, theta, problem.lambda_policy.grid, projected)
        gcv_trace = trace2
        if lam2 != lam:
            lam = lam2
            prof = _Profile(problem, lam, projected)
            theta, J, trace_b = multistart_minimize(prof, m.lower, m.upper,
                                                    np.vstack([theta, pilot]), problem.optimizer)
            opt_trace = opt_trace + trace_b
            passes.append({"lambda": lam, "theta": theta.tolist(), "objective": J})
    J, alpha = prof.solve(theta)
    K = problem.gram(theta, projected)
    n = problem.n
    tr = hat_trace(K, lam)
    resid = n * lam * alpha  # (I - A) r
    sigma2 = float(resid @ resid / max(n - tr, 1e-12))
    if projected:
        pk = problem.projected_kernel(theta)
        delta_nodes = pk_cross(pk, problem.rule.nodes, problem.Xc, kxy=problem.kqx,
                               kqx=pk.kq, kqy=problem.kqx) @ alpha
        rank, dropped = pk.rank, list(pk.basis.dropped)
    else:
        delta_nodes = problem.kqx @ alpha
        rank, dropped = None, []
    A = K + n * lam * np.eye(n)
    return CalibrationResult(
        method=method, theta_hat=theta, alpha_hat=problem.to_original(alpha), lambda_used=float(lam),
        objective=float(J), sigma2_hat=sigma2,
        ortho_residual=_ortho_residual(problem, theta, delta_nodes),
        gcv_trace=gcv_trace,
        diagnostics={"optimizer": opt_trace, "passes": passes, "jitter_events": prof.events,
                     "subspace_rank": rank, "rank_drops": dropped,
                     "condition_estimate": float(np.linalg.cond(A)),
                     "boundary_warning": _boundary_flags(m, theta)},
    )


def fit_pk(problem: CalibrationProblem, pilot: CalibrationResult | None = None) -> CalibrationResult:
    """Projected-kernel estimate: L2 pilot, GCV, multi-start search, one lambda refresh."""
    if pilot is None:
        pilot = fit_l2(problem)
    if problem.lambda_policy.kind == "fixed":
        lam, trace = problem.lambda_policy.value, []
    else:
        lam, trace = gcv_select(problem, pilot.theta_hat)
    res = _fit_profile(problem, "pk", True, lam, trace, pilot.theta_hat)
    res.diagnostics["pilot_theta"] = pilot.theta_hat.tolist()
    return res


def fit_ko_mode(problem: CalibrationProblem, lam: float | None = None,
                pilot: CalibrationResult | None = None) -> CalibrationResult:
    """The same profile search with the unprojected kernel; lambda is user supplied."""
    if lam is None:
        if problem.lambda_policy.kind != "fixed":
            raise ValidationError("KO-mode calibration needs a fixed lambda")
        lam = problem.lambda_policy.value
    if not lam > 0:
        raise ValidationError(f"lambda must be positive, got {lam}")
    if pilot is None:
        pilot = fit_l2(problem)
    res = _fit_profile(problem.with_lambda(lam), "ko", False, float(lam), [], pilot.theta_hat)
    res.diagnostics["pilot_theta"] = pilot.theta_hat.tolist()
    return res


# ---------------------------------------------------------------------------
# prediction and asymptotics

def predict_zeta(result: CalibrationResult, problem: CalibrationProblem, x) -> np.ndarray:
    """Fitted true process at the rows of ``x``; a single point gives a float."""
    single = np.ndim(x) <= 1 and np.size(x) == problem.rule.domain.dim
    x = problem.rule.domain.check_points(x, "prediction point")
    theta = result.theta_hat
    alpha = result.alpha_hat
    if result.method == "l2":
        out = kernel_matrix(problem.kernel, x, problem.X) @ alpha
        return float(out[0]) if single else out
    if result.method == "pk":
        pk = problem.projected_kernel(theta)
        delta = pk_cross(pk, x, problem.X, kqx=None, kqy=problem.kqx[:, np.argsort(problem.order)]) @ alpha
    else:
        delta = kernel_matrix(problem.kernel, x, problem.X) @ alpha
    out = problem.model.eval(x, theta) + delta
    return float(out[0]) if single else out


def asymptotic_covariance(problem: CalibrationProblem, theta, sigma2, zeta=None,
                          result: CalibrationResult | None = None) -> np.ndarray:
    """``(4 sigma^2 / n) V^{-1} W V^{-1}`` with uniform-measure averages over the domain.

    ``zeta`` is the true process (a vectorised callable); without it the fitted
    process from ``result`` is used.
    """
    rule, m = problem.rule, problem.model
    theta = np.asarray(theta, dtype=float)
    nodes = rule.nodes
    if zeta is None:
        if result is None:
            raise ValidationError("asymptotic_covariance needs the true process or a fitted result")
        zv = predict_zeta(result, problem, nodes)
    else:
        zv = np.asarray(zeta(nodes), dtype=float).reshape(-1)
    g = m.grad_theta(nodes, theta)
    H = m.hess_theta(nodes, theta)
    resid = zv - m.eval(nodes, theta)
    w = rule.weights / rule.domain.volume
    W = (g * w[:, None]).T @ g
    V = 2.0 * W - 2.0 * np.einsum("q,q,qij->ij", w, resid, H)
    V = 0.5 * (V + V.T)
    ev = np.linalg.eigvalsh(V)
    if not ev[0] > 1e-12 * max(abs(ev[-1]), 1e-300):
        raise SingularityError(f"V is not positive definite (eigenvalues {ev.tolist()})")
    Vi = np.linalg.inv(V)
    S = 4.0 * sigma2 / problem.n * Vi @ W @ Vi
    return 0.5 * (S + S.T)


__all__ = [
    "CalibrationProblem", "CalibrationResult", "LambdaPolicy", "OptimizerSettings",
    "asymptotic_covariance", "factor_shifted", "fit_ko_mode", "fit_l2", "fit_pk",
    "gcv_select", "hat_trace", "predict_zeta", "profile_objective",
]
