"""Computer models ``y^s(x, theta)`` with theta-gradients.

Built-in analytic models live in :data:`REGISTRY`; :func:`external_model`
wraps a simulator process that speaks newline-delimited JSON on its
standard streams.
"""

from __future__ import annotations

import itertools
import json
import os
import selectors
import shlex
import subprocess
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .domain import as_points
from .errors import (ExternalModelError, NumericError, ProcessError, ProtocolError,
                     TransportError, ValidationError)

PROTOCOL_VERSION = 1
_FD_BASE = np.finfo(float).eps ** (1.0 / 3.0)


@dataclass
class ComputerModel:
    """A cheap deterministic simulator.

    ``func(X, theta)`` maps an ``(n, d)`` array to ``n`` outputs. ``grad_func``
    and ``hess_func`` are optional analytic derivatives in theta returning
    ``(n, q)`` and ``(n, q, q)``; when absent, central differences are used.
    ``theta_free_gradient`` declares that the sensitivities do not depend on
    theta, which lets callers reuse projections across theta.
    """

    name: str
    dim: int
    theta_bounds: tuple
    func: Callable
    grad_func: Optional[Callable] = None
    hess_func: Optional[Callable] = None
    theta_free_gradient: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        b = tuple((float(lo), float(hi)) for lo, hi in self.theta_bounds)
        for i, (lo, hi) in enumerate(b):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValidationError(f"theta bound {i} must satisfy lo < hi, got [{lo}, {hi}]")
        self.theta_bounds = b

    @property
    def q(self) -> int:
        return len(self.theta_bounds)

    @property
    def lower(self):
        return np.array([b[0] for b in self.theta_bounds])

    @property
    def upper(self):
        return np.array([b[1] for b in self.theta_bounds])

    def in_bounds(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def _theta(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape != (self.q,):
            raise ValidationError(f"theta must have length {self.q}, got {theta.shape[0]}")
        return theta

    def eval(self, X, theta) -> np.ndarray:
        X = as_points(X, self.dim)
        y = np.asarray(self.func(X, self._theta(theta)), dtype=float).reshape(len(X))
        if not np.all(np.isfinite(y)):
            raise NumericError(f"model {self.name!r} returned non-finite output at theta={list(theta)}")
        return y

    def grad_theta(self, X, theta) -> np.ndarray:
        """Sensitivities ``dy^s/dtheta`` as an ``(n, q)`` array."""
        X = as_points(X, self.dim)
        theta = self._theta(theta)
        if self.grad_func is None:
            return grad_fd(self, X, theta)
        return np.asarray(self.grad_func(X, theta), dtype=float).reshape(len(X), self.q)

    def hess_theta(self, X, theta) -> np.ndarray:
        """Second theta-derivatives as an ``(n, q, q)`` array."""
        X = as_points(X, self.dim)
        theta = self._theta(theta)
        if self.hess_func is not None:
            return np.asarray(self.hess_func(X, theta), dtype=float).reshape(len(X), self.q, self.q)
        return _hess_fd(self, X, theta)

    def sensitivity_funcs(self, theta):
        """The raw spanning functions of G_theta as callables on points."""
        theta = self._theta(theta)
        return [(lambda X, i=i: self.grad_theta(X, theta)[:, i]) for i in range(self.q)]

    def describe(self):
        return {"name": self.name, "params": self.params, "theta_bounds": [list(b) for b in self.theta_bounds]}


def _fd_stencil(model, theta, i, h):
    """Inward-clipped central-difference points for coordinate ``i``."""
    step = _FD_BASE * (1.0 + abs(theta[i])) if h is None else h
    hi = theta.copy()
    lo = theta.copy()
    hi[i] = min(theta[i] + step, model.upper[i])
    lo[i] = max(theta[i] - step, model.lower[i])
    return lo, hi


def grad_fd(model: ComputerModel, X, theta, h: float | None = None) -> np.ndarray:
    """Central-difference theta-gradient, never evaluating outside the theta box."""
    X = as_points(X, model.dim)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    out = np.empty((len(X), model.q))
    for i in range(model.q):
        lo, hi = _fd_stencil(model, theta, i, h)
        out[:, i] = (model.eval(X, hi) - model.eval(X, lo)) / (hi[i] - lo[i])
    return out


def _hess_fd(model, X, theta):
    q = model.q
    out = np.empty((len(X), q, q))
    for j in range(q):
        step = np.finfo(float).eps ** 0.25 * (1.0 + abs(theta[j]))
        lo, hi = theta.copy(), theta.copy()
        hi[j] = min(theta[j] + step, model.upper[j])
        lo[j] = max(theta[j] - step, model.lower[j])
        out[:, :, j] = (model.grad_theta(X, hi) - model.grad_theta(X, lo)) / (hi[j] - lo[j])
    return 0.5 * (out + out.transpose(0, 2, 1))


# ---------------------------------------------------------------------------
# built-in models

def monomial_exponents(dim, degree):
    """All exponent tuples with total degree <= ``degree``, ordered by degree."""
    exps = [e for e in itertools.product(range(degree + 1), repeat=dim) if sum(e) <= degree]
    return sorted(exps, key=lambda e: (sum(e), tuple(-v for v in e)))


def linear_features(dim=1, degree=1, theta_bounds=None, exponents=None) -> ComputerModel:
    """``y^s(x, theta) = theta . phi(x)`` with monomial features ``phi``."""
    exps = [tuple(e) for e in exponents] if exponents is not None else monomial_exponents(dim, degree)
    E = np.array(exps, dtype=float).reshape(len(exps), dim)
    q = len(exps)
    if theta_bounds is None:
        theta_bounds = [(-10.0, 10.0)] * q

    def features(X):
        return np.prod(X[:, None, :] ** E[None, :, :], axis=2)

    return ComputerModel(
        name="linear-features", dim=dim, theta_bounds=theta_bounds,
        func=lambda X, th: features(X) @ th,
        grad_func=lambda X, th: features(X),
        hess_func=lambda X, th: np.zeros((len(X), q, q)),
        theta_free_gradient=True,
        params={"dim": dim, "exponents": [list(e) for e in exps]},
    )


def sine_freq(theta_bounds=((0.5, 3.0), (0.5, 3.0))) -> ComputerModel:
    """``y^s(x, theta) = theta_1 sin(theta_2 x)`` on a 1-D domain."""

    def func(X, th):
        return th[0] * np.sin(th[1] * X[:, 0])

    def grad(X, th):
        x = X[:, 0]
        return np.column_stack([np.sin(th[1] * x), th[0] * x * np.cos(th[1] * x)])

    def hess(X, th):
        x = X[:, 0]
        H = np.zeros((len(x), 2, 2))
        H[:, 0, 1] = H[:, 1, 0] = x * np.cos(th[1] * x)
        H[:, 1, 1] = -th[0] * x * x * np.sin(th[1] * x)
        return H

    return ComputerModel(name="sine-freq", dim=1, theta_bounds=theta_bounds, func=func,
                         grad_func=grad, hess_func=hess, params={})


def constant_output(dim=1, value=0.0, theta_bounds=((-1.0, 1.0),)) -> ComputerModel:
    """A model that ignores theta; its sensitivity span is empty."""
    q = len(theta_bounds)
    return ComputerModel(
        name="constant", dim=dim, theta_bounds=theta_bounds,
        func=lambda X, th: np.full(len(X), float(value)),
        grad_func=lambda X, th: np.zeros((len(X), q)),
        hess_func=lambda X, th: np.zeros((len(X), q, q)),
        theta_free_gradient=True, params={"value": value},
    )


REGISTRY = {
    "linear-features": linear_features,
    "sine-freq": sine_freq,
    "constant": constant_output,
}


def builtin(name: str, **config) -> ComputerModel:
    if name not in REGISTRY:
        raise ValidationError(f"unknown model {name!r}; registry has {sorted(REGISTRY)}")
    model = REGISTRY[name](**config)
    model.params = {**model.params, **{k: v for k, v in config.items() if k != "theta_bounds"}}
    return model


# ---------------------------------------------------------------------------
# external process models

@dataclass(frozen=True)
class ExternalModelSpec:
    command: str
    dim: int
    theta_bounds: tuple
    timeout: float = 30.0
    protocol_version: int = PROTOCOL_VERSION

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValidationError(f"external model timeout must be positive, got {self.timeout}")


class SubprocessClient:
    """One simulator process; requests are answered strictly in order.

    A handle is not thread-safe: parallel callers need their own client.
    """

    def __init__(self, spec: ExternalModelSpec):
        self.spec = spec
        argv = shlex.split(spec.command)
        try:
            self.proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                         stderr=subprocess.DEVNULL, bufsize=0)
        except OSError as exc:
            raise ProcessError(f"cannot start external model {spec.command!r}: {exc}") from exc
        self._sel = selectors.DefaultSelector()
        self._sel.register(self.proc.stdout, selectors.EVENT_READ)
        self._buf = b""

    def _readline(self):
        deadline = time.monotonic() + self.spec.timeout
        while b"\n" not in self._buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0 or not self._sel.select(remaining):
                raise TransportError(f"external model timed out after {self.spec.timeout} s")
            chunk = os.read(self.proc.stdout.fileno(), 65536)
            if not chunk:
                code = self.proc.wait()
                raise ProcessError(f"external model exited with status {code}")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line.decode("utf-8")

    def request(self, x, theta, want_grad=False):
        msg = {"v": self.spec.protocol_version, "x": [float(v) for v in x],
               "theta": [float(v) for v in theta], "want_grad": bool(want_grad)}
        if self.proc.poll() is not None:
            raise ProcessError(f"external model exited with status {self.proc.returncode}")
        try:
            self.proc.stdin.write((json.dumps(msg) + "\n").encode("utf-8"))
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            code = self.proc.wait()
            raise ProcessError(f"external model exited with status {code}") from exc
        line = self._readline()
        try:
            resp = json.loads(line)
        except json.JSONDecodeError:
            raise ProtocolError(f"malformed response line: {line!r}") from None
        if not isinstance(resp, dict):
            raise ProtocolError(f"malformed response line: {line!r}")
        if "error" in resp:
            raise ExternalModelError(f"external model reported: {resp['error']}")
        y = resp.get("y")
        if not isinstance(y, (int, float)) or isinstance(y, bool):
            raise ProtocolError(f"malformed response line: {line!r}")
        grad = resp.get("grad")
        if grad is not None:
            if not isinstance(grad, list) or len(grad) != len(theta):
                raise ProtocolError(f"malformed response line: {line!r}")
            grad = [float(g) for g in grad]
        return float(y), grad

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
                self.proc.wait(timeout=2)
            except (OSError, subprocess.TimeoutExpired):
                self.proc.kill()
                self.proc.wait()
        self._sel.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def external_model(spec: ExternalModelSpec) -> ComputerModel:
    """Wrap a simulator process; gradients fall back to finite differences
    once the process answers a gradient request without ``grad``."""
    client = SubprocessClient(spec)
    state = {"grad_ok": True}

    def func(X, th):
        return np.array([client.request(x, th)[0] for x in X])

    model = ComputerModel(name="external", dim=spec.dim, theta_bounds=spec.theta_bounds,
                          func=func, params={"command": spec.command})

    def grad(X, th):
        if state["grad_ok"]:
            rows = []
            for x in X:
                _, g = client.request(x, th, want_grad=True)
                if g is None:
                    state["grad_ok"] = False
                    break
                rows.append(g)
            else:
                return np.array(rows).reshape(len(X), len(th))
        return grad_fd(model, X, th)

    model.grad_func = grad
    model.client = client
    return model
