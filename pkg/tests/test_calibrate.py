import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pkcal.calibrate import (DEFAULT_LAMBDA_GRID, CalibrationProblem, LambdaPolicy, asymptotic_covariance,
                             factor_shifted, fit_ko_mode, fit_l2, fit_pk, gcv_select, hat_trace, predict_zeta,
                             profile_objective)
from pkcal.domain import DomainSpec, build_quadrature
from pkcal.errors import (DegenerateError, IllConditionedError, OptimizationError, SingularityError,
                          ValidationError)
from pkcal.kernel import KernelSpec
from pkcal.model import ComputerModel, constant_output, linear_features, sine_freq
from pkcal.optim import OptimizerSettings
from pkcal.study import oracle_theta_star, scenario, simulate

THETA0 = np.array([1.0, -0.5])


def lin_problem(rule, kernel, n=60, sigma=0.1, seed=0, policy=LambdaPolicy(), extra=None, model=None):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, 1))
    y = THETA0[0] + THETA0[1] * X[:, 0] + sigma * rng.standard_normal(n)
    if extra is not None:
        y = y + extra(X)
    return CalibrationProblem(X, y, model or linear_features(), kernel, rule, policy)


def offset_model(bounds=((-5.0, 5.0),)):
    """y^s(x, theta) = theta, constant in x."""
    return ComputerModel("offset", 1, bounds, lambda X, t: np.full(len(X), t[0]),
                         lambda X, t: np.ones((len(X), 1)), lambda X, t: np.zeros((len(X), 1, 1)),
                         theta_free_gradient=True)


# --- problem validation ----------------------------------------------------

def test_problem_validation(unit_rule, matern):
    m = linear_features()
    X = np.array([[0.1], [0.5], [0.9]])
    with pytest.raises(ValidationError, match="q \\+ 1"):
        CalibrationProblem(X[:2], [1.0, 2.0], m, matern, unit_rule)
    with pytest.raises(ValidationError, match="indices 0 and 3"):
        CalibrationProblem(np.vstack([X, X[:1]]), np.ones(4), m, matern, unit_rule)
    with pytest.raises(ValidationError, match="outside"):
        CalibrationProblem(X + 0.5, np.ones(3), m, matern, unit_rule)
    with pytest.raises(ValidationError, match="3 rows"):
        CalibrationProblem(X, np.ones(4), m, matern, unit_rule)
    with pytest.raises(ValidationError):
        LambdaPolicy.fixed(-1.0)
    with pytest.raises(ValidationError):
        LambdaPolicy.gcv([])


# --- profile solver ----------------------------------------------------------

def test_profile_zero_residual(unit_rule, matern):
    p = lin_problem(unit_rule, matern, sigma=0.0)
    J, alpha = profile_objective(p, THETA0, 1e-3)
    assert J == pytest.approx(0.0, abs=1e-24) and np.max(np.abs(alpha)) <= 1e-12


def test_profile_large_lambda_limit(unit_rule, matern):
    p = lin_problem(unit_rule, matern)
    theta = np.array([0.3, 0.2])
    r = p.residual(theta)
    J, _ = profile_objective(p, theta, 1e8)
    assert J == pytest.approx(r @ r / p.n, rel=1e-6)


def _pkmode(K, r, lam, alpha):
    n = len(r)
    d = r - K @ alpha
    return d @ d / n + lam * alpha @ K @ alpha


@pytest.mark.parametrize("seed", range(5))
def test_profile_matches_direct_quadratic(seed, unit_rule, matern):
    p = lin_problem(unit_rule, matern, n=5, seed=seed)
    rng = np.random.default_rng(seed)
    theta, lam = rng.uniform(-2, 2, 2), 10 ** rng.uniform(-4, -1)
    J, alpha = profile_objective(p, theta, lam)
    # normal equations of the quadratic in alpha, solved in the caller's order
    K = p.gram(theta)[np.ix_(np.argsort(p.order), np.argsort(p.order))]
    r = p.y - p.model.eval(p.X, theta)
    a_ref = np.linalg.solve(K @ K / p.n + lam * K, K @ r / p.n)
    assert np.max(np.abs(alpha - a_ref)) <= 1e-8 * max(1.0, np.max(np.abs(a_ref)))
    assert J == pytest.approx(_pkmode(K, r, lam, a_ref), abs=1e-8)


def test_profile_optimality_against_perturbations(unit_rule, matern):
    p = lin_problem(unit_rule, matern, n=25, seed=4)
    theta, lam = np.array([0.7, 0.1]), 3e-3
    J, alpha = profile_objective(p, theta, lam)
    K = p.gram(theta)[np.ix_(np.argsort(p.order), np.argsort(p.order))]
    r = p.y - p.model.eval(p.X, theta)
    best = _pkmode(K, r, lam, alpha)
    assert best == pytest.approx(J, rel=1e-12)
    rng = np.random.default_rng(0)
    assert all(_pkmode(K, r, lam, alpha + 1e-2 * rng.standard_normal(p.n)) >= best for _ in range(1000))


def test_profile_monotone_in_lambda(unit_rule, matern):
    p = lin_problem(unit_rule, matern, seed=2)
    Js = [profile_objective(p, [0.2, 0.4], lam)[0] for lam in DEFAULT_LAMBDA_GRID]
    assert all(b >= a for a, b in zip(Js, Js[1:]))


def test_profile_rejects_nonpositive_lambda(unit_rule, matern):
    with pytest.raises(ValidationError):
        profile_objective(lin_problem(unit_rule, matern), THETA0, 0.0)


def test_jitter_escalation_and_failure():
    A = np.ones((4, 4))  # rank one
    events = []
    factor_shifted(A, 0.0, 1e-12, events)
    assert events and events[-1]["jitter_rel"] <= 1e-6
    with pytest.raises(IllConditionedError) as info:
        factor_shifted(-np.eye(3), 0.0, 1e-12)
    assert info.value.condition is not None


# --- GCV ---------------------------------------------------------------------

def test_gcv_single_and_trace(unit_rule, matern):
    p = lin_problem(unit_rule, matern)
    lam, trace = gcv_select(p, THETA0, [3e-3])
    assert lam == 3e-3 and len(trace) == 1
    K = p.gram(THETA0)
    for lam in DEFAULT_LAMBDA_GRID:
        assert 0.0 <= hat_trace(K, lam) <= p.n
    _, trace = gcv_select(p, THETA0)
    assert all(np.isfinite(s) and s > 0 for _, s in trace)
    with pytest.raises(ValidationError):
        gcv_select(p, THETA0, [])
    with pytest.raises(ValidationError):
        gcv_select(p, THETA0, [1e-3, -1.0])


def test_gcv_degenerate_trace(unit_rule, matern):
    p = lin_problem(unit_rule, matern, n=10)
    with pytest.raises(DegenerateError):
        gcv_select(p, THETA0, [1e-300])


def test_gcv_pure_noise_prefers_large_lambda(unit_rule, matern):
    grid = DEFAULT_LAMBDA_GRID
    median = grid[len(grid) // 2]
    hits = 0
    for seed in range(50):
        p = lin_problem(unit_rule, matern, seed=seed)
        hits += gcv_select(p, THETA0)[0] >= median
    assert hits >= 45


@pytest.mark.parametrize("name", ["S1", "S2", "S3"])
def test_gcv_finite_on_scenarios(name, matern):
    sc = scenario(name, n=50)
    rule = build_quadrature(sc.domain, level=64)
    X, y = simulate(sc, 0)
    p = CalibrationProblem(X, y, sc.model, KernelSpec("matern-5/2", (0.25,)), rule)
    pilot = fit_l2(p)
    _, trace = gcv_select(p, pilot.theta_hat)
    assert all(np.isfinite(s) and s > 0 for _, s in trace)


# --- estimators --------------------------------------------------------------

def test_fit_pk_noiseless_recovers_theta(unit_rule, matern):
    res = fit_pk(lin_problem(unit_rule, matern, sigma=0.0))
    assert np.max(np.abs(res.theta_hat - THETA0)) <= 1e-6
    assert res.objective >= 0 and res.sigma2_hat >= 0
    assert res.method == "pk" and len(res.gcv_trace) > 0


def test_fit_pk_misspecified_close_to_oracle():
    sc = scenario("S2", n=200, sigma=0.1, seed=3)
    rule = build_quadrature(sc.domain, level=64)
    theta_star = oracle_theta_star(sc, rule)
    X, y = simulate(sc, 0)
    p = CalibrationProblem(X, y, sc.model, KernelSpec("matern-5/2", (0.25,)), rule)
    res = fit_pk(p)
    se = np.sqrt(np.diag(asymptotic_covariance(p, theta_star, sc.sigma ** 2, zeta=sc.zeta)))
    assert np.all(np.abs(res.theta_hat - theta_star) <= 3 * se)


def test_fit_pk_permutation_invariant(unit_rule, matern):
    p = lin_problem(unit_rule, matern, n=40, extra=lambda X: 0.5 * X[:, 0] ** 2)
    perm = np.random.default_rng(9).permutation(p.n)
    q = CalibrationProblem(p.X[perm], p.y[perm], p.model, matern, unit_rule)
    a, b = fit_pk(p), fit_pk(q)
    assert a.theta_hat.tobytes() == b.theta_hat.tobytes()
    assert np.array_equal(a.alpha_hat[perm], b.alpha_hat)


def test_fit_pk_deterministic(unit_rule, matern):
    a = fit_pk(lin_problem(unit_rule, matern, seed=5))
    b = fit_pk(lin_problem(unit_rule, matern, seed=5))
    assert a.theta_hat.tobytes() == b.theta_hat.tobytes() and a.alpha_hat.tobytes() == b.alpha_hat.tobytes()


def test_fit_pk_orthogonality_at_optimum():
    sc = scenario("S3", n=80)
    rule = build_quadrature(sc.domain, level=64)
    X, y = simulate(sc, 1)
    p = CalibrationProblem(X, y, sc.model, KernelSpec("matern-5/2", (0.25,)), rule)
    res = fit_pk(p)
    assert not res.diagnostics["boundary_warning"]
    ys = sc.model.eval(rule.nodes, res.theta_hat)
    scale = np.max(np.abs((rule.weights * ys) @ sc.model.grad_theta(rule.nodes, res.theta_hat)))
    assert np.linalg.norm(res.ortho_residual) <= 1e-3 * scale


def test_fit_pk_boundary_flag(unit_rule, matern):
    m = linear_features(theta_bounds=[(2.0, 3.0), (-1.0, 1.0)])
    res = fit_pk(lin_problem(unit_rule, matern, model=m))
    assert res.diagnostics["boundary_warning"]
    assert m.in_bounds(res.theta_hat)


def test_no_converged_start_raises(unit_rule, matern):
    p = lin_problem(unit_rule, matern)
    p.optimizer = OptimizerSettings(starts=2, max_iters=1)
    with pytest.raises(OptimizationError) as info:
        fit_pk(p)
    assert len(info.value.trace) >= 2 and not any(t["converged"] for t in info.value.trace)


def test_fit_l2_noiseless_and_minimal(unit_rule, matern):
    p = lin_problem(unit_rule, matern, n=80, sigma=0.0)
    res = fit_l2(p)
    assert np.max(np.abs(res.theta_hat - THETA0)) <= 1e-4
    zeta_nodes = p.kqx @ res.alpha_hat[p.order]
    dist = lambda t: float(unit_rule.weights @ (zeta_nodes - p.model.eval(unit_rule.nodes, t)) ** 2)  # noqa: E731
    rng = np.random.default_rng(0)
    best = dist(res.theta_hat)
    assert all(best <= dist(t) for t in rng.uniform(p.model.lower, p.model.upper, (1000, 2)))


def test_fit_l2_and_pk_agree_when_well_specified(unit_rule, matern):
    p = lin_problem(unit_rule, matern, n=200, seed=8)
    a, b = fit_pk(p), fit_l2(p)
    se = np.sqrt(np.diag(asymptotic_covariance(p, THETA0, 0.01, zeta=lambda X: THETA0[0] + THETA0[1] * X[:, 0])))
    assert np.all(np.abs(a.theta_hat - b.theta_hat) <= 2 * np.sqrt(2) * se)


def test_ko_equals_pk_for_empty_subspace(unit_rule, matern):
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(30, 1))
    y = np.sin(3 * X[:, 0]) + 0.1 * rng.standard_normal(30)
    p = CalibrationProblem(X, y, constant_output(), matern, unit_rule, LambdaPolicy.fixed(1e-3))
    a, b = fit_pk(p), fit_ko_mode(p)
    assert a.theta_hat.tobytes() == b.theta_hat.tobytes()
    assert a.alpha_hat.tobytes() == b.alpha_hat.tobytes()
    assert a.objective == b.objective


def test_ko_depends_on_theta_only_through_residual(unit_rule, matern):
    sq = ComputerModel("square", 1, ((-2.0, 2.0),), lambda X, t: np.full(len(X), t[0] ** 2))
    rng = np.random.default_rng(1)
    X = rng.uniform(size=(20, 1))
    p = CalibrationProblem(X, rng.normal(size=20), sq, matern, unit_rule, LambdaPolicy.fixed(1e-2))
    assert profile_objective(p, [1.3], 1e-2, projected=False)[0] == profile_objective(p, [-1.3], 1e-2, projected=False)[0]


def test_ko_needs_lambda(unit_rule, matern):
    with pytest.raises(ValidationError):
        fit_ko_mode(lin_problem(unit_rule, matern))


def test_ko_drifts_while_pk_is_stable():
    sc = scenario("S2", n=100)
    rule = build_quadrature(sc.domain, level=64)
    X, y = simulate(sc, 2)
    k = KernelSpec("matern-5/2", (0.25,))
    ko, pk = [], []
    for lam in (1e-4, 1e-2, 1.0):
        p = CalibrationProblem(X, y, sc.model, k, rule, LambdaPolicy.fixed(lam))
        pk_res = fit_pk(p)
        ko.append(fit_ko_mode(p).theta_hat)
        pk.append(pk_res.theta_hat)
    p = CalibrationProblem(X, y, sc.model, k, rule)
    res = fit_pk(p)
    se = np.sqrt(np.diag(asymptotic_covariance(p, res.theta_hat, res.sigma2_hat, result=res)))
    spread = lambda T: np.max((np.max(T, axis=0) - np.min(T, axis=0)) / se)  # noqa: E731
    assert spread(np.array(ko)) > 10
    assert spread(np.array(pk)) < 2


# --- asymptotics and prediction ---------------------------------------------

def test_asymptotic_covariance_offset_model(unit_rule, matern):
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(40, 1))
    p = CalibrationProblem(X, 0.3 + rng.normal(size=40), offset_model(), matern, unit_rule)
    S = asymptotic_covariance(p, [0.3], 0.25, zeta=lambda X: np.full(len(X), 0.3))
    assert S.shape == (1, 1) and S[0, 0] == pytest.approx(0.25 / 40, rel=1e-12)


def test_asymptotic_covariance_linear_closed_form(unit_rule, matern):
    p = lin_problem(unit_rule, matern, n=50)
    S = asymptotic_covariance(p, THETA0, 0.04, zeta=lambda X: X[:, 0] ** 2)
    assert np.allclose(S, 0.04 / 50 * np.array([[4.0, -6.0], [-6.0, 12.0]]), rtol=1e-10)
    assert np.allclose(S, S.T) and np.linalg.eigvalsh(S)[0] >= 0


def test_asymptotic_covariance_singular(unit_rule, matern):
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(10, 1))
    p = CalibrationProblem(X, rng.normal(size=10), constant_output(), matern, unit_rule)
    with pytest.raises(SingularityError):
        asymptotic_covariance(p, [0.0], 1.0, zeta=lambda X: X[:, 0])
    with pytest.raises(ValidationError):
        asymptotic_covariance(p, [0.0], 1.0)


def test_predict_zeta(unit_rule, matern):
    p = lin_problem(unit_rule, matern, n=30, sigma=0.0, extra=lambda X: np.sin(6 * X[:, 0]),
                    policy=LambdaPolicy.fixed(1e-10))
    res = fit_pk(p)
    assert np.max(np.abs(predict_zeta(res, p, p.X) - p.y)) <= 1e-4
    single = predict_zeta(res, p, [0.3])
    assert isinstance(single, float)
    res.alpha_hat = np.zeros(p.n)
    x = np.linspace(0, 1, 9)[:, None]
    assert np.array_equal(predict_zeta(res, p, x), p.model.eval(x, res.theta_hat))
    with pytest.raises(ValidationError):
        predict_zeta(res, p, [1.2])


@given(seed=st.integers(0, 1000))
@settings(max_examples=10, deadline=None)
def test_sine_model_fit_stays_in_box(seed):
    sc = scenario("S3", n=30, seed=seed)
    rule = build_quadrature(sc.domain, level=32)
    X, y = simulate(sc, 0)
    res = fit_pk(CalibrationProblem(X, y, sine_freq(), KernelSpec("matern-3/2", (0.3,)), rule))
    assert sc.model.in_bounds(res.theta_hat) and res.objective >= 0
