import numpy as np
import pytest

from pkcal.errors import (ExternalModelError, NumericError, ProcessError, ProtocolError, TransportError,
                          ValidationError)
from pkcal.model import (ComputerModel, ExternalModelSpec, SubprocessClient, builtin, constant_output,
                         external_model, grad_fd, linear_features, sine_freq)

from conftest import double_command


def test_builtin_examples():
    lin = builtin("linear-features")
    X = np.linspace(0, 1, 5)[:, None]
    assert np.all(lin.eval(X, [0.0, 0.0]) == 0)
    phi = np.column_stack([np.ones(5), X[:, 0]])
    assert np.array_equal(lin.grad_theta(X, [3.0, -2.0]), phi)
    assert np.array_equal(lin.grad_theta(X, [0.1, 0.7]), phi)
    assert builtin("sine-freq").eval([[1.0]], [2.0, np.pi / 2])[0] == pytest.approx(2.0, abs=1e-15)
    with pytest.raises(ValidationError, match="linear-features"):
        builtin("no-such-model")


def test_model_validation():
    with pytest.raises(ValidationError):
        ComputerModel("bad", 1, ((1.0, 0.0),), lambda X, t: X[:, 0])
    m = ComputerModel("nan", 1, ((0.0, 1.0),), lambda X, t: np.full(len(X), np.nan))
    with pytest.raises(NumericError):
        m.eval([[0.5]], [0.5])
    with pytest.raises(ValidationError):
        linear_features().eval([[0.5]], [1.0])


def test_fd_examples():
    lin = linear_features()
    X = np.random.default_rng(0).uniform(size=(20, 1))
    for h in (1e-3, 1e-5):
        assert np.max(np.abs(grad_fd(lin, X, np.array([0.4, -1.2]), h) - lin.grad_theta(X, [0.4, -1.2]))) <= 1e-10
    const = constant_output()
    assert np.all(grad_fd(const, X, np.array([0.2])) == 0)


def _fd_vs_analytic(model, rng, count=100):
    worst = 0.0
    for _ in range(count):
        x = rng.uniform(size=(1, model.dim))
        th = model.lower + (model.upper - model.lower) * rng.uniform(0.05, 0.95, model.q)
        worst = max(worst, np.max(np.abs(grad_fd(model, x, th) - model.grad_theta(x, th))))
    return worst


@pytest.mark.parametrize("model", [linear_features(), linear_features(dim=2, degree=2), sine_freq()],
                         ids=["linear", "quadratic-2d", "sine"])
def test_gradient_consistency(model):
    assert _fd_vs_analytic(model, np.random.default_rng(3)) <= 1e-6


def test_fd_stays_inside_box():
    seen = []

    def f(X, th):
        seen.append(np.array(th))
        return th[0] * X[:, 0] + th[1] ** 2

    m = ComputerModel("rec", 1, ((0.0, 1.0), (-1.0, 1.0)), f)
    X = np.array([[0.3]])
    for th in ([0.0, -1.0], [1.0, 1.0], [1e-9, 0.5]):
        g = m.grad_theta(X, th)
        assert np.allclose(g, [[0.3, 2 * th[1]]], atol=1e-5)
    assert all(m.in_bounds(t) for t in seen)


def test_hessian_fallback_matches_analytic():
    s = sine_freq()
    numeric = ComputerModel("sine-numeric", 1, s.theta_bounds, s.func, s.grad_func)
    X = np.linspace(0, 1, 7)[:, None]
    assert np.max(np.abs(numeric.hess_theta(X, [1.3, 1.7]) - s.hess_theta(X, [1.3, 1.7]))) <= 1e-6


def test_determinism():
    s = sine_freq()
    X = np.random.default_rng(1).uniform(size=(50, 1))
    assert np.array_equal(s.eval(X, [1.1, 2.2]), s.eval(X, [1.1, 2.2]))


def _spec(name, **kw):
    return ExternalModelSpec(double_command(name), 1, kw.pop("bounds", ((0.0, 5.0),)), **kw)


def test_external_echo():
    m = external_model(_spec("echo_model.py"))
    try:
        assert m.eval([[0.4]], [3.0])[0] == 3.0
        # the echo double never sends gradients, so finite differences take over
        assert m.grad_theta([[0.4]], [3.0])[0, 0] == pytest.approx(1.0, abs=1e-8)
    finally:
        m.client.close()


def test_external_sine_matches_builtin():
    b = sine_freq()
    m = external_model(_spec("sine_model.py", bounds=b.theta_bounds))
    rng = np.random.default_rng(5)
    try:
        X = rng.uniform(size=(100, 1))
        for x in X:
            th = rng.uniform(0.5, 3.0, 2)
            assert abs(m.eval(x[None], th)[0] - b.eval(x[None], th)[0]) <= 1e-12
        g = m.grad_theta(X[:3], [1.0, 2.0])
        assert g.shape == (3, 2) and np.allclose(g, b.grad_theta(X[:3], [1.0, 2.0]), atol=1e-12)
    finally:
        m.client.close()


def test_external_gradient_request():
    with SubprocessClient(_spec("sine_model.py", bounds=((0, 3), (0, 3)))) as c:
        y, g = c.request([0.5], [1.0, 2.0], want_grad=True)
        assert len(g) == 2


@pytest.mark.parametrize("name,exc", [("malformed_model.py", ProtocolError), ("crash_model.py", ProcessError),
                                      ("error_model.py", ExternalModelError)])
def test_external_failures(name, exc):
    with SubprocessClient(_spec(name)) as c:
        with pytest.raises(exc) as info:
            c.request([0.5], [1.0])
    if exc is ProtocolError:
        assert "not json at all" in str(info.value)


def test_external_timeout():
    with SubprocessClient(_spec("slow_model.py", timeout=0.3)) as c:
        with pytest.raises(TransportError, match="timed out"):
            c.request([0.5], [1.0])


def test_external_spec_validation():
    with pytest.raises(ValidationError):
        _spec("echo_model.py", timeout=0)
    with pytest.raises(ProcessError):
        SubprocessClient(ExternalModelSpec("/no/such/binary", 1, ((0, 1),)))
