"""Synthetic scenarios, reference values of theta*, and Monte-Carlo studies."""

from __future__ import annotations

import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .bayes import McmcSettings, PosteriorSpec, credible_region, sample_posterior
from .calibrate import (CalibrationProblem, LambdaPolicy, asymptotic_covariance, fit_ko_mode,
                        fit_l2, fit_pk, predict_zeta)
from .domain import DomainSpec, QuadratureRule, build_quadrature
from .errors import OracleError, PkcalError, StudyError, ValidationError
from .kernel import KernelSpec
from .model import ComputerModel, linear_features, sine_freq
from .optim import OptimizerSettings, multistart_minimize, start_points

METHODS = ("pk", "l2", "ko", "pk-bayes", "ogp-bayes")
MAX_FAILURE_FRACTION = 0.05


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    domain: DomainSpec
    zeta: Callable
    model: ComputerModel
    sigma: float
    n: int
    replications: int
    seed: int = 0
    noise: str = "gaussian"
    theta0: tuple | None = None
    description: str = ""

    def __post_init__(self):
        errors = []
        if not self.sigma >= 0:
            errors.append(f"sigma must be >= 0, got {self.sigma}")
        if self.replications < 1:
            errors.append(f"replications must be >= 1, got {self.replications}")
        if self.n < self.model.q + 1:
            errors.append(f"n must be >= q + 1, got {self.n}")
        if self.noise not in ("gaussian", "uniform"):
            errors.append(f"noise must be 'gaussian' or 'uniform', got {self.noise!r}")
        if self.model.dim != self.domain.dim:
            errors.append("model and domain dimensions differ")
        if errors:
            raise ValidationError("; ".join(errors))

    def to_dict(self):
        return {"name": self.name, "bounds": [list(b) for b in self.domain.bounds],
                "model": self.model.describe(), "sigma": self.sigma, "n": self.n,
                "replications": self.replications, "seed": self.seed, "noise": self.noise,
                "theta0": None if self.theta0 is None else list(self.theta0),
                "description": self.description}


# ---------------------------------------------------------------------------
# shipped scenarios

S1_THETA0 = (1.0, -0.5)
S2_CURVATURE = 1.0
S3_ZETA = (1.2, 1.7, 0.15)  # amplitude, frequency, linear drift


def scenario_s1(n=100, replications=200, sigma=0.1, seed=0):
    """Well specified: the truth is the linear model at ``S1_THETA0``."""
    t0 = np.array(S1_THETA0)
    return ScenarioSpec("S1", DomainSpec(((0.0, 1.0),)),
                        lambda X: t0[0] + t0[1] * X[:, 0], linear_features(), sigma, n, replications,
                        seed, theta0=S1_THETA0, description="zeta(x) = 1 - 0.5 x, model theta_1 + theta_2 x")


def scenario_s2(n=100, replications=100, sigma=0.1, seed=0, curvature=S2_CURVATURE):
    """Misspecified: a quadratic term the linear model cannot represent."""
    t0 = np.array(S1_THETA0)
    return ScenarioSpec("S2", DomainSpec(((0.0, 1.0),)),
                        lambda X: t0[0] + t0[1] * X[:, 0] + curvature * X[:, 0] ** 2,
                        linear_features(), sigma, n, replications, seed, theta0=S1_THETA0,
                        description=f"zeta(x) = 1 - 0.5 x + {curvature:g} x^2, model theta_1 + theta_2 x")


def scenario_s3(n=100, replications=100, sigma=0.1, seed=0):
    """Nonlinear in theta: ``theta_1 sin(theta_2 x)`` against a sine with a linear drift."""
    a, f, b = S3_ZETA
    return ScenarioSpec("S3", DomainSpec(((0.0, 2.0),)),
                        lambda X: a * np.sin(f * X[:, 0]) + b * X[:, 0], sine_freq(), sigma, n,
                        replications, seed,
                        description=f"zeta(x) = {a:g} sin({f:g} x) + {b:g} x on [0, 2], model theta_1 sin(theta_2 x)")


SCENARIOS = {"S1": scenario_s1, "S2": scenario_s2, "S3": scenario_s3}


def scenario(name, **overrides) -> ScenarioSpec:
    if name not in SCENARIOS:
        raise ValidationError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    return SCENARIOS[name](**overrides)


# ---------------------------------------------------------------------------
# data and oracle

def replicate_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def simulate(sc: ScenarioSpec, index: int, n: int | None = None):
    """``X ~ Uniform(domain)`` and ``y = zeta(X) + noise``, reproducible per (seed, index, n)."""
    n = sc.n if n is None else int(n)
    rng = np.random.default_rng(np.random.SeedSequence(int(sc.seed), spawn_key=(int(index), n)))
    X = sc.domain.uniform(rng, n)
    if sc.noise == "gaussian":
        e = sc.sigma * rng.standard_normal(n)
    else:
        e = sc.sigma * np.sqrt(3.0) * rng.uniform(-1.0, 1.0, n)
    return X, np.asarray(sc.zeta(X), dtype=float).reshape(n) + e


def stationarity_residual(sc: ScenarioSpec, rule: QuadratureRule, theta) -> np.ndarray:
    """Uniform-measure average of ``(zeta - y^s) dy^s/dtheta`` at ``theta``."""
    nodes = rule.nodes
    d = sc.zeta(nodes) - sc.model.eval(nodes, theta)
    g = sc.model.grad_theta(nodes, theta)
    return (rule.weights * d) @ g / rule.domain.volume


def oracle_theta_star(sc: ScenarioSpec, rule: QuadratureRule, tol=1e-8, residual_tol=1e-6):
    """The L2 projection of the true process onto the model family."""
    m = sc.model
    nodes, w = rule.nodes, rule.weights
    zv = np.asarray(sc.zeta(nodes), dtype=float)
    if m.theta_free_gradient:
        # y^s(x, theta) = y^s(x, 0) + phi(x) . theta
        base = m.eval(nodes, np.zeros(m.q))
        phi = m.grad_theta(nodes, np.zeros(m.q))
        W = (phi * w[:, None]).T @ phi
        try:
            theta = np.linalg.solve(W, (phi * w[:, None]).T @ (zv - base))
        except np.linalg.LinAlgError:
            raise OracleError("model sensitivities are linearly dependent; theta* is not unique") from None
    else:
        def dist(t):
            if not m.in_bounds(t):
                return np.inf
            d = zv - m.eval(nodes, t)
            return float(w @ (d * d))

        settings = OptimizerSettings(starts=max(16, 8 * m.q), max_iters=20000, x_tol=1e-12, f_tol=1e-18)
        theta, _, trace = multistart_minimize(dist, m.lower, m.upper,
                                              start_points(m.lower, m.upper, settings.n_starts(m.q), 0), settings)
        # Newton polish on the normal equations
        for _ in range(50):
            d = zv - m.eval(nodes, theta)
            g = m.grad_theta(nodes, theta)
            H = m.hess_theta(nodes, theta)
            grad = -2.0 * (w * d) @ g
            hess = 2.0 * (g * w[:, None]).T @ g - 2.0 * np.einsum("q,q,qij->ij", w, d, H)
            step = np.linalg.solve(hess, grad)
            theta = theta - step
            if np.max(np.abs(step)) <= tol * 1e-2:
                break
        if not m.in_bounds(theta):
            raise OracleError(f"theta* {theta.tolist()} left the parameter box", trace)
    res = stationarity_residual(sc, rule, theta)
    if np.linalg.norm(res) > residual_tol:
        raise OracleError(f"first-order residual {np.linalg.norm(res):.3e} exceeds {residual_tol:g}")
    return theta


# ---------------------------------------------------------------------------
# study settings and reports

@dataclass(frozen=True)
class StudySettings:
    kernel: KernelSpec = KernelSpec("matern-5/2", (0.25,))
    quad_level: int = 64
    lambda_policy: LambdaPolicy = LambdaPolicy()
    optimizer: OptimizerSettings = OptimizerSettings()
    mcmc: McmcSettings = McmcSettings(chains=2, burn_in=500, samples=1000)
    ko_lambdas: tuple = (1e-4, 1e-2, 1.0)
    credible_level: float = 0.95
    bayes_noise: str = "plugin"  # or "unit" for c = 1
    workers: int = 1

    def __post_init__(self):
        if self.bayes_noise not in ("plugin", "unit"):
            raise ValidationError(f"bayes_noise must be 'plugin' or 'unit', got {self.bayes_noise!r}")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        if any(not lam > 0 for lam in self.ko_lambdas):
            raise ValidationError("KO lambdas must be positive")


@dataclass
class StudyReport:
    scenario: dict
    methods: tuple
    theta_star: list
    attempted: int
    failures: list
    summary: dict
    replications: list
    ko_sweep: dict = field(default_factory=dict)
    error_curve: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)

    @property
    def successes(self) -> int:
        return self.attempted - len(self.failures)

    def to_dict(self, include_runtime=True):
        out = {"scenario": self.scenario, "methods": list(self.methods), "theta_star": self.theta_star,
               "attempted": self.attempted, "successes": self.successes, "failures": self.failures,
               "summary": self.summary, "ko_sweep": self.ko_sweep, "error_curve": self.error_curve,
               "replications": self.replications}
        if include_runtime:
            out["runtime"] = self.runtime
        return out

    def table_rows(self):
        """One flat row per (replication, method) for plotting."""
        rows = []
        for rec in self.replications:
            for key, val in rec.items():
                if isinstance(val, dict) and "theta" in val:
                    rows.append({"index": rec["index"], "method": key,
                                 **{f"theta_{i + 1}": v for i, v in enumerate(val["theta"])}})
        return rows


def _problem(sc, settings, rule, X, y, policy=None):
    return CalibrationProblem(X, y, sc.model, settings.kernel, rule,
                              settings.lambda_policy if policy is None else policy,
                              settings.optimizer, seed=sc.seed)


def _replicate(sc, settings, rule, methods, theta_star, index):
    X, y = simulate(sc, index)
    p = _problem(sc, settings, rule, X, y)
    out = {"index": index}
    pilot = fit_l2(p)
    if "l2" in methods:
        out["l2"] = {"theta": pilot.theta_hat.tolist(), "lambda": pilot.lambda_used}
    pk = None
    if any(m in methods for m in ("pk", "pk-bayes", "ogp-bayes")):
        pk = fit_pk(p, pilot)
        out["pk"] = {"theta": pk.theta_hat.tolist(), "lambda": pk.lambda_used, "sigma2": pk.sigma2_hat}
    if "ko" in methods:
        out["ko_sweep"] = {}
        for lam in settings.ko_lambdas:
            fixed = _problem(sc, settings, rule, X, y, LambdaPolicy.fixed(lam))
            ko = fit_ko_mode(fixed, lam, pilot)
            pkf = fit_pk(fixed, pilot)
            out["ko_sweep"][repr(float(lam))] = {"ko": ko.theta_hat.tolist(), "pk": pkf.theta_hat.tolist()}
    for variant in ("pk", "ogp"):
        name = f"{variant}-bayes"
        if name not in methods:
            continue
        s2 = pk.sigma2_hat if settings.bayes_noise == "plugin" else None
        seed = int(np.random.SeedSequence(sc.seed, spawn_key=(index, 1)).generate_state(1)[0])
        spec = PosteriorSpec(variant, pk.lambda_used, mcmc=settings.mcmc, seed=seed, noise_variance=s2)
        post = sample_posterior(spec, p)
        cr = credible_region(post, settings.credible_level)
        out[name] = {"theta": cr.mean.tolist(), "intervals": cr.intervals.tolist(),
                     "covered": cr.contains_interval(theta_star).tolist(),
                     "split_rhat": post.split_rhat.tolist(), "ess": post.ess.tolist()}
    return out


# process-pool plumbing: scenarios hold closures, so workers inherit state by fork
_JOB = {}


def _job_call(index):
    fn, args = _JOB["fn"], _JOB["args"]
    try:
        return fn(*args, index)
    except PkcalError as exc:
        return {"index": index, "failed": f"{exc.category}: {exc}"}
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        return {"index": index, "failed": f"numeric: {exc}"}


def _map(fn, args, indices, workers):
    _JOB.update(fn=fn, args=args)
    try:
        if workers > 1 and "fork" in multiprocessing.get_all_start_methods():
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(min(workers, os.cpu_count() or 1), mp_context=ctx) as ex:
                return list(ex.map(_job_call, indices, chunksize=1))
        return [_job_call(i) for i in indices]
    finally:
        _JOB.clear()


def _split(results, attempted):
    ok = [r for r in results if "failed" not in r]
    failures = [{"index": r["index"], "error": r["failed"]} for r in results if "failed" in r]
    if len(failures) > MAX_FAILURE_FRACTION * attempted:
        raise StudyError(f"{len(failures)} of {attempted} replications failed", failures)
    return ok, failures


def _summarise(thetas, theta_star):
    T = np.array(thetas)
    R = len(T)
    cov = np.atleast_2d(np.cov(T.T)) if R > 1 else np.zeros((T.shape[1], T.shape[1]))
    err = np.linalg.norm(T - theta_star, axis=1)
    return {"count": R, "mean": T.mean(axis=0).tolist(), "median": np.median(T, axis=0).tolist(),
            "bias": (T.mean(axis=0) - theta_star).tolist(),
            "bias_se": np.sqrt(np.diag(cov) / max(R, 1)).tolist(),
            "median_error": float(np.median(err)), "empirical_cov": cov.tolist()}


def max_pairwise_distance(points) -> float:
    P = np.array(points)
    return float(max(np.linalg.norm(a - b) for a in P for b in P))


def mc_study(sc: ScenarioSpec, methods=("pk",), settings: StudySettings = StudySettings()) -> StudyReport:
    """Run ``sc.replications`` replications of each method and aggregate against theta*."""
    methods = tuple(methods)
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise ValidationError(f"unknown study methods {bad}; choose from {list(METHODS)}")
    t0 = time.perf_counter()
    rule = build_quadrature(sc.domain, level=settings.quad_level)
    theta_star = oracle_theta_star(sc, rule)
    results = _map(_replicate, (sc, settings, rule, methods, theta_star), range(sc.replications),
                   settings.workers)
    ok, failures = _split(results, sc.replications)
    summary = {}
    for m in ("pk", "l2"):
        if m in methods and ok:
            summary[m] = _summarise([r[m]["theta"] for r in ok], theta_star)
    if "pk" in summary:
        try:
            asym = asymptotic_covariance(_problem(sc, settings, rule, *simulate(sc, 0)), theta_star,
                                         sc.sigma ** 2, zeta=sc.zeta)
            emp = np.array(summary["pk"]["empirical_cov"])
            summary["pk"]["asymptotic_cov"] = asym.tolist()
            with np.errstate(divide="ignore", invalid="ignore"):
                summary["pk"]["cov_relative_error"] = (np.abs(emp - asym) / np.abs(asym)).tolist()
        except PkcalError as exc:
            summary["pk"]["asymptotic_cov_error"] = str(exc)
    for m in ("pk-bayes", "ogp-bayes"):
        if m in methods and ok:
            cov = np.array([r[m]["covered"] for r in ok], dtype=float)
            summary[m] = {**_summarise([r[m]["theta"] for r in ok], theta_star),
                          "coverage": cov.mean(axis=0).tolist(),
                          "max_split_rhat": float(np.max([r[m]["split_rhat"] for r in ok]))}
    sweep = {}
    if "ko" in methods and ok:
        keys = list(ok[0]["ko_sweep"])
        table = {k: {"ko_median": np.median([r["ko_sweep"][k]["ko"] for r in ok], axis=0).tolist(),
                     "pk_median": np.median([r["ko_sweep"][k]["pk"] for r in ok], axis=0).tolist()}
                 for k in keys}
        sweep = {"lambdas": [float(k) for k in keys], "table": table,
                 "ko_drift": max_pairwise_distance([table[k]["ko_median"] for k in keys]),
                 "pk_drift": max_pairwise_distance([table[k]["pk_median"] for k in keys])}
    return StudyReport(sc.to_dict(), methods, theta_star.tolist(), sc.replications, failures, summary, ok,
                       ko_sweep=sweep,
                       runtime={"seconds": time.perf_counter() - t0, "workers": settings.workers})


# ---------------------------------------------------------------------------
# prediction-error rates

def _rate_rep(sc, settings, rule, schedule, index):
    X, y = simulate(sc, index)
    policy = None
    if schedule is not None:
        policy = LambdaPolicy.fixed(schedule[0] * sc.n ** (-schedule[1]))
    p = _problem(sc, settings, rule, X, y, policy)
    res = fit_pk(p)
    diff = sc.zeta(rule.nodes) - predict_zeta(res, p, rule.nodes)
    return {"index": index, "n": sc.n, "error": float(np.sqrt(rule.weights @ (diff * diff))),
            "lambda": res.lambda_used}


def rate_study(sc: ScenarioSpec, n_grid, replications=None, settings: StudySettings = StudySettings(),
               lambda_schedule: tuple | None = None) -> StudyReport:
    """Median L2 prediction error of the projected-kernel fit along ``n_grid`` and its log-log slope.

    ``lambda_schedule = (c, p)`` replaces GCV by ``lambda_n = c n^{-p}``.
    """
    n_grid = [int(v) for v in n_grid]
    if len(n_grid) < 3 or any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValidationError(f"n_grid must be increasing with at least 3 entries, got {n_grid}")
    R = sc.replications if replications is None else int(replications)
    t0 = time.perf_counter()
    rule = build_quadrature(sc.domain, level=settings.quad_level)
    curve, reps, failures, attempted = [], [], [], 0
    for n in n_grid:
        scn = replace(sc, n=n, replications=R)
        results = _map(_rate_rep, (scn, settings, rule, lambda_schedule), range(R), settings.workers)
        attempted += R
        ok, fail = _split(results, R)
        failures += [{**f, "n": n} for f in fail]
        reps += ok
        curve.append(float(np.median([r["error"] for r in ok])))
    slope, intercept = np.polyfit(np.log(n_grid), np.log(curve), 1)
    m = sc.model
    return StudyReport(sc.to_dict(), ("pk",), [], attempted, failures,
                       {"slope": float(slope), "intercept": float(intercept)}, reps,
                       error_curve={"n": n_grid, "median_error": curve,
                                    "lambda_schedule": None if lambda_schedule is None else list(lambda_schedule),
                                    "kernel": settings.kernel.to_dict(), "model": m.name},
                       runtime={"seconds": time.perf_counter() - t0, "workers": settings.workers})


def theoretical_rate(family: str, dim: int) -> float:
    """Exponent ``-m / (2m + d)`` with ``m = nu + d/2`` for a Matern family."""
    nu = {"matern-1/2": 0.5, "matern-3/2": 1.5, "matern-5/2": 2.5}.get(family)
    if nu is None:
        raise ValidationError(f"no finite smoothness for kernel family {family!r}")
    m = nu + dim / 2
    return -m / (2 * m + dim)
