"""Posterior inference for theta with the discrepancy coefficients integrated out.

The joint log density over ``(alpha, theta)`` is

    c * [ -(1/n) ||r - K alpha||^2 - lam alpha^T K alpha ],   r = y - y^s(X, theta),

with ``c = 1`` by default. Integrating ``alpha`` out gives

    log p(theta | y) = -c lam r^T (K + n lam I)^{-1} r - 1/2 log det(K/n + lam I) - 1/2 log det K

up to a theta-free constant. ``K`` is the projected gram (``pk``), the full
gram (``ko``), or the projected gram with an extra ``-1/2 log det K`` prior
factor (``ogp``). Setting a noise variance ``s2`` uses ``c = n / (2 s2)``,
which rescales the quadratic term only and leaves every mode unchanged.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from scipy.stats import chi2

from .calibrate import CalibrationProblem, factor_shifted, logdet_from_factor
from .errors import IllConditionedError, MixingError, ValidationError
from .kernel import KernelSpec
from .optim import multistart_minimize, start_points

VARIANTS = ("pk", "ko", "ogp")


@dataclass(frozen=True)
class McmcSettings:
    chains: int = 4
    burn_in: int = 1000
    samples: int = 2000
    target_accept: float = 0.3
    adapt_window: int = 100

    def __post_init__(self):
        if self.chains < 1 or self.samples < 1 or self.burn_in < 0 or self.adapt_window < 1:
            raise ValidationError("MCMC settings need chains >= 1, samples >= 1, burn_in >= 0, adapt_window >= 1")
        if not 0 < self.target_accept < 1:
            raise ValidationError(f"target_accept must lie in (0, 1), got {self.target_accept}")


@dataclass(frozen=True)
class PosteriorSpec:
    variant: str
    lam: float
    kernel: KernelSpec | None = None  # None -> the problem's kernel
    theta_prior: str = "uniform"
    mcmc: McmcSettings = McmcSettings()
    seed: int = 0
    noise_variance: float | None = None  # None -> c = 1
    ogp_literal: bool = False  # OGP as the full-kernel marginal times det(K_G)^{-1/2}

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {list(VARIANTS)}, got {self.variant!r}")
        if not (self.lam is not None and np.isfinite(self.lam) and self.lam > 0):
            raise ValidationError(f"lambda must be positive, got {self.lam!r}")
        if self.theta_prior != "uniform":
            raise ValidationError(f"only the uniform theta prior is available, got {self.theta_prior!r}")
        if self.noise_variance is not None and not self.noise_variance > 0:
            raise ValidationError(f"noise_variance must be positive, got {self.noise_variance!r}")

    def scale(self, n):
        return 1.0 if self.noise_variance is None else n / (2.0 * self.noise_variance)


def _with_kernel(problem: CalibrationProblem, kernel):
    if kernel is None or kernel == problem.kernel:
        return problem
    return CalibrationProblem(problem.X, problem.y, problem.model, kernel, problem.rule,
                              problem.lambda_policy, problem.optimizer, problem.jitter_rel,
                              problem.seed, problem.rank_tol)


class _Marginal:
    """Evaluates the log marginal posterior, caching whatever does not move with theta."""

    def __init__(self, spec: PosteriorSpec, problem: CalibrationProblem):
        self.spec, self.problem = spec, problem
        self.c = spec.scale(problem.n)
        self.theta_free = spec.variant == "ko" or problem.model.theta_free_gradient
        self._cache = None

    def _terms(self, theta):
        """``(factor of K + n lam I, determinant part)`` at theta."""
        if self.theta_free and self._cache is not None:
            return self._cache
        p, lam, n = self.problem, self.spec.lam, self.problem.n
        if self.spec.variant == "ko":
            K = p.kxx
        elif self.spec.variant == "ogp" and self.spec.ogp_literal:
            K = p.kxx
        else:
            K = p.gram(theta, True)
        fac = factor_shifted(K, n * lam, p.jitter_rel)
        det = -0.5 * (logdet_from_factor(fac) - n * np.log(n)) - 0.5 * _logdet_pd(K, p.jitter_rel)
        if self.spec.variant == "ogp":
            KG = p.gram(theta, True)
            det -= 0.5 * _logdet_pd(KG, p.jitter_rel)
        out = (fac, det)
        if self.theta_free and not (self.spec.variant == "ogp" and not p.model.theta_free_gradient):
            self._cache = out
        return out

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        if not self.problem.model.in_bounds(theta):
            return -np.inf
        fac, det = self._terms(theta)
        r = self.problem.residual(theta)
        return -self.c * self.spec.lam * float(r @ cho_solve(fac, r)) + det


def _logdet_pd(K, jitter_rel):
    return logdet_from_factor(factor_shifted(K, 0.0, jitter_rel))


def log_marginal_posterior(spec: PosteriorSpec, problem: CalibrationProblem, theta) -> float:
    """Log posterior density of theta up to a theta-free constant; ``-inf`` outside the box."""
    return _Marginal(spec, _with_kernel(problem, spec.kernel))(theta)


def conditional_alpha(spec: PosteriorSpec, problem: CalibrationProblem, theta):
    """Gaussian law of alpha given theta and y: ``(mean, covariance)`` in the caller's data order."""
    problem = _with_kernel(problem, spec.kernel)
    theta = np.asarray(theta, dtype=float)
    if not problem.model.in_bounds(theta):
        raise ValidationError(f"theta {theta.tolist()} lies outside the parameter box")
    n, lam = problem.n, spec.lam
    K = problem.kxx if spec.variant == "ko" else problem.gram(theta, True)
    mean = cho_solve(factor_shifted(K, n * lam, problem.jitter_rel), problem.residual(theta))
    s, U = np.linalg.eigh(K)
    prec = spec.scale(n) * (s * s / n + lam * s)
    if not np.all(prec > 1e-14 * prec.max()):
        raise IllConditionedError("conditional precision of alpha is singular", float(prec.max() / max(prec.min(), 1e-300)))
    cov = (U / (2.0 * prec)) @ U.T
    cov = 0.5 * (cov + cov.T)
    inv = np.argsort(problem.order)
    return problem.to_original(mean), cov[np.ix_(inv, inv)]


# ---------------------------------------------------------------------------
# sampling

@dataclass
class McmcChain:
    samples: np.ndarray
    log_density: np.ndarray
    acceptance_rate: float
    split_rhat: np.ndarray
    ess: np.ndarray


@dataclass
class PosteriorSamples:
    chains: list
    mode: np.ndarray
    laplace_cov: np.ndarray
    split_rhat: np.ndarray  # across all chains
    ess: np.ndarray
    trace: dict = field(default_factory=dict)

    @property
    def pooled(self) -> np.ndarray:
        return np.vstack([c.samples for c in self.chains])


def _autocov(x):
    n = len(x)
    x = x - x.mean()
    f = np.fft.rfft(x, 2 * n)
    return np.fft.irfft(f * np.conj(f))[:n] / n


def split_rhat(draws) -> np.ndarray:
    """Split-R-hat for ``(chains, S, q)`` draws (each chain is halved)."""
    draws = np.asarray(draws, dtype=float)
    m, S, q = draws.shape
    h = S // 2
    if h < 2:
        return np.full(q, np.nan)
    parts = np.concatenate([draws[:, :h], draws[:, S - h:]], axis=0)
    means = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean(axis=0)
    B = h * means.var(axis=0, ddof=1)
    var = (h - 1) / h * W + B / h
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sqrt(var / W)
    return np.where(W > 0, out, np.where(B > 0, np.inf, 1.0))


def effective_sample_size(draws) -> np.ndarray:
    """Multi-chain ESS with Geyer's initial positive sequence truncation."""
    draws = np.asarray(draws, dtype=float)
    m, S, q = draws.shape
    out = np.empty(q)
    for j in range(q):
        x = draws[:, :, j]
        acov = np.array([_autocov(c) for c in x])
        W = acov[:, 0].mean() * S / (S - 1) if S > 1 else acov[:, 0].mean()
        if not W > 0:
            out[j] = float(m * S)
            continue
        var = (S - 1) / S * W + (x.mean(axis=1).var(ddof=1) if m > 1 else 0.0)
        rho = 1.0 - (W - acov.mean(axis=0)) / var
        rho[0] = 1.0
        tau, t = -1.0, 0
        while t + 1 < S:
            pair = rho[t] + rho[t + 1]
            if pair < 0:
                break
            tau += 2.0 * pair
            t += 2
        out[j] = m * S / max(tau, 1.0 / np.log10(max(m * S, 10)))
    return out


def _fd_hessian(f, x, lower, upper):
    q = len(x)
    h = 1e-4 * (upper - lower)
    xc = np.clip(x, lower + 2 * h, upper - 2 * h)
    H = np.empty((q, q))
    f0 = f(xc)
    for i in range(q):
        ei = np.zeros(q)
        ei[i] = h[i]
        H[i, i] = (f(xc + ei) - 2 * f0 + f(xc - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(q)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(xc + ei + ej) - f(xc + ei - ej) - f(xc - ei + ej)
                                 + f(xc - ei - ej)) / (4 * h[i] * h[j])
    return H


def posterior_mode(spec: PosteriorSpec, problem: CalibrationProblem):
    """Multi-start maximisation of the marginal density plus a Laplace covariance."""
    problem = _with_kernel(problem, spec.kernel)
    target = _Marginal(spec, problem)
    m = problem.model
    neg = lambda t: -target(t)  # noqa: E731
    starts = start_points(m.lower, m.upper, problem.optimizer.n_starts(m.q), spec.seed)
    mode, f, trace = multistart_minimize(neg, m.lower, m.upper, starts, problem.optimizer)
    H = _fd_hessian(neg, mode, m.lower, m.upper)
    H = 0.5 * (H + H.T)
    w, U = np.linalg.eigh(H)
    if np.all(np.isfinite(w)) and w[0] > 0:
        C0 = (U / w) @ U.T
    else:
        C0 = np.diag(((m.upper - m.lower) / 100.0) ** 2)
    return mode, C0, trace


def _run_chain(target, spec, mode, C0, lower, upper, index):
    st = spec.mcmc
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(index,)))
    q = len(mode)
    L0 = np.linalg.cholesky(C0)
    x = np.clip(mode + L0 @ rng.standard_normal(q), lower, upper)
    lp = target(x)
    if not np.isfinite(lp):
        x, lp = mode.copy(), target(mode)
    cov = C0.copy()
    L = L0
    log_scale = np.log(2.38 ** 2 / q)
    burn_hist, burn_acc = [], 0
    out = np.empty((st.samples, q))
    out_lp = np.empty(st.samples)
    acc = 0
    for t in range(st.burn_in + st.samples):
        prop = x + np.exp(0.5 * log_scale) * (L @ rng.standard_normal(q))
        lp_prop = target(prop)
        log_u = np.log(rng.uniform())
        ok = np.isfinite(lp_prop) and log_u < lp_prop - lp
        if ok:
            x, lp = prop, lp_prop
        if t < st.burn_in:
            burn_acc += ok
            burn_hist.append(x)
            log_scale += (float(ok) - st.target_accept) / (t + 1) ** 0.6
            if (t + 1) % st.adapt_window == 0:
                H = np.array(burn_hist[len(burn_hist) // 2:])
                if len(H) > 2 * q + 2:
                    emp = np.atleast_2d(np.cov(H.T))
                    emp = emp + 1e-10 * np.diag(np.diag(C0))
                    try:
                        L = np.linalg.cholesky(emp)
                        cov = emp
                    except np.linalg.LinAlgError:
                        pass
        else:
            k = t - st.burn_in
            out[k] = x
            out_lp[k] = lp
            acc += ok
    if st.burn_in > 0 and burn_acc == 0:
        raise MixingError(f"chain {index} rejected every burn-in proposal",
                          {"chain": index, "start": x.tolist(), "log_scale": log_scale})
    draws = out[None]
    return McmcChain(out, out_lp, acc / st.samples, split_rhat(draws), effective_sample_size(draws)), \
        {"chain": index, "burn_in_acceptance": burn_acc / max(st.burn_in, 1),
         "final_scale": float(np.exp(log_scale)), "proposal_cov": cov.tolist()}


def sample_posterior(spec: PosteriorSpec, problem: CalibrationProblem, threads: int = 1) -> PosteriorSamples:
    """Adaptive random-walk Metropolis on the marginal density, one independent stream per chain."""
    problem = _with_kernel(problem, spec.kernel)
    mode, C0, opt_trace = posterior_mode(spec, problem)
    m = problem.model
    target = _Marginal(spec, problem)
    target(mode)  # fill theta-free caches before chains share the evaluator

    def run(i):
        return _run_chain(target, spec, mode, C0, m.lower, m.upper, i)

    idx = range(spec.mcmc.chains)
    if threads > 1 and spec.mcmc.chains > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, idx))
    else:
        results = [run(i) for i in idx]
    chains = [c for c, _ in results]
    draws = np.stack([c.samples for c in chains])
    return PosteriorSamples(chains, mode, C0, split_rhat(draws), effective_sample_size(draws),
                            {"optimizer": opt_trace, "chains": [t for _, t in results]})


# ---------------------------------------------------------------------------
# summaries

@dataclass
class CredibleRegion:
    level: float
    intervals: np.ndarray  # (q, 2)
    mean: np.ndarray
    cov: np.ndarray
    radius2: float

    def contains_interval(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return (self.intervals[:, 0] <= theta) & (theta <= self.intervals[:, 1])

    def in_ellipsoid(self, theta) -> bool:
        d = np.asarray(theta, dtype=float) - self.mean
        return bool(d @ np.linalg.solve(self.cov, d) <= self.radius2)

    def to_dict(self):
        return {"level": self.level, "intervals": self.intervals.tolist(), "mean": self.mean.tolist(),
                "cov": self.cov.tolist(), "radius2": self.radius2}


def credible_region(chains, level=0.95) -> CredibleRegion:
    """Equal-tailed intervals per coordinate and a chi-square ellipsoid from pooled draws."""
    if not 0 < level < 1:
        raise ValidationError(f"credible level must lie in (0, 1), got {level}")
    if isinstance(chains, PosteriorSamples):
        chains = chains.chains
    if isinstance(chains, McmcChain):
        chains = [chains]
    draws = np.vstack([c.samples if isinstance(c, McmcChain) else np.atleast_2d(c) for c in chains])
    if len(draws) < 100:
        raise ValidationError(f"need at least 100 draws for a credible region, got {len(draws)}")
    a = (1 - level) / 2
    iv = np.quantile(draws, [a, 1 - a], axis=0).T
    cov = np.atleast_2d(np.cov(draws.T))
    return CredibleRegion(float(level), iv, draws.mean(axis=0), cov, float(chi2.ppf(level, draws.shape[1])))


def write_chain_table(path, chains):
    """One draw per line: ``theta_1..theta_q,log_density``; chains follow one another."""
    if isinstance(chains, PosteriorSamples):
        chains = chains.chains
    q = chains[0].samples.shape[1]
    header = ",".join([f"theta_{i + 1}" for i in range(q)] + ["log_density"])
    rows = np.vstack([np.column_stack([c.samples, c.log_density]) for c in chains])
    np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt="%.17g")
