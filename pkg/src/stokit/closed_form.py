"""Analytic solutions of the linear example systems evaluated on a given path.

Stochastic convolutions with deterministic integrands are left-point Ito sums
on the path grid; nothing sub-steps internally, so every oracle lives on the
same nodes as the schemes it checks.

The ``*_values`` functions work on stacked node values ``W`` of shape
``(paths, nodes, m)`` and return states ``(paths, nodes, n)``; the ``*_solve``
functions wrap them for a single :class:`BrownianPath`.
"""

from dataclasses import dataclass
from math import factorial
from typing import Callable, Sequence

import numpy as np

from .errors import CapabilityError, SingularParameterError, ValidationError
from .integrators import Trajectory

_PADE_Q = 6
_PADE = [
    factorial(2 * _PADE_Q - k) * factorial(_PADE_Q)
    / (factorial(2 * _PADE_Q) * factorial(k) * factorial(_PADE_Q - k))
    for k in range(_PADE_Q + 1)
]
_PADE_THETA = 0.5


def expm(A):
    """Matrix exponential by scaling and squaring with a diagonal (6, 6) Pade approximant."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    norm = np.abs(A).sum(axis=0).max() if A.size else 0.0
    s = max(0, int(np.ceil(np.log2(norm / _PADE_THETA)))) if norm > 0 else 0
    X = A / 2.0**s
    eye = np.eye(n)
    num, den = eye * _PADE[0], eye * _PADE[0]
    power = eye
    for k in range(1, _PADE_Q + 1):
        power = power @ X
        term = _PADE[k] * power
        num = num + term
        den = den + (-1) ** k * term
    R = np.linalg.solve(den, num)
    for _ in range(s):
        R = R @ R
    return R


def expm_integral(A, h):
    """``(e^{A h}, int_0^h e^{A s} ds)`` from one augmented exponential."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = A * h
    aug[:n, n:] = np.eye(n) * h
    E = expm(aug)
    return E[:n, :n], E[:n, n:]


@dataclass(frozen=True)
class OUParams:
    b: float
    a: float
    sigma0_sq: float = 0.0

    def __post_init__(self):
        if self.sigma0_sq < 0:
            raise ValidationError("initial variance must be non-negative")

    @property
    def stationary_variance(self):
        if self.b == 0:
            raise SingularParameterError("b = 0 has no stationary variance")
        return self.a**2 / (2.0 * self.b)


@dataclass(frozen=True)
class LinearSystemParams:
    A: np.ndarray
    f: object
    g: Sequence

    @property
    def n(self):
        return np.atleast_2d(self.A).shape[0]


def _left_sum(terms):
    """Cumulative sums over cells with a leading zero: ``out[:, k] = sum_{j<k}``."""
    out = np.zeros(terms.shape[:1] + (terms.shape[1] + 1,) + terms.shape[2:])
    np.cumsum(terms, axis=1, out=out[:, 1:])
    return out


def _as_batch(W):
    W = np.asarray(W, dtype=float)
    return W[None] if W.ndim == 2 else W


def _coef(c, times):
    return np.array([c(t) for t in times], dtype=float) if callable(c) else np.full(times.shape, float(c))


def ou_values(b, a, x0, times, W):
    W = _as_batch(W)
    t = times - times[0]
    dW = np.diff(W[..., 0], axis=1)
    conv = _left_sum(np.exp(b * t[:-1]) * dW)
    x0 = np.asarray(x0, dtype=float).reshape(-1, 1)
    return (np.exp(-b * t) * x0 + a * np.exp(-b * t) * conv)[..., None]


def gbm_values(r, alpha, x0, times, W):
    W = _as_batch(W)
    t = times - times[0]
    x0 = np.asarray(x0, dtype=float).reshape(-1, 1)
    return (x0 * np.exp((r - 0.5 * alpha**2) * t + alpha * (W[..., 0] - W[:, :1, 0])))[..., None]


def linear_scalar_values(a1, a2, b1, b2, x0, times, W):
    W = _as_batch(W)
    dt = np.diff(times)
    left = times[:-1]
    A1, A2, B1, B2 = (_coef(c, left) for c in (a1, a2, b1, b2))
    dW = np.diff(W[..., 0], axis=1)
    log_phi = _left_sum(np.broadcast_to((A1 - 0.5 * B1**2) * dt, dW.shape) + B1 * dW)
    phi = np.exp(log_phi)
    inv = 1.0 / phi[:, :-1]
    drift_part = _left_sum((A2 - B1 * B2) * inv * dt)
    noise_part = _left_sum(B2 * inv * dW)
    x0 = np.asarray(x0, dtype=float).reshape(-1, 1)
    return (phi * (x0 + drift_part + noise_part))[..., None]


def linear_system_values(params, x0, times, W):
    W = _as_batch(W)
    A = np.atleast_2d(np.asarray(params.A, dtype=float))
    n = A.shape[0]
    if W.shape[-1] != len(params.g):
        raise ValidationError(f"path has {W.shape[-1]} noise columns, system has {len(params.g)}")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[-1] != n:
        raise ValidationError("initial state has the wrong dimension")
    dt = times[1] - times[0]
    E, Q = expm_integral(A, dt)
    f = params.f if callable(params.f) else (lambda t, v=np.asarray(params.f, dtype=float): v)
    gs = [gk if callable(gk) else (lambda t, v=np.asarray(gk, dtype=float): v) for gk in params.g]
    dW = np.diff(W, axis=1)
    P, N = W.shape[0], W.shape[1]
    X = np.empty((P, N, n))
    x = np.broadcast_to(x0, (P, n)).astype(float)
    X[:, 0] = x
    for k in range(N - 1):
        t = times[k]
        G = np.stack([np.asarray(gk(t), dtype=float) for gk in gs], axis=-1)
        x = (x + (dW[:, k] @ G.T)) @ E.T + Q @ np.asarray(f(t), dtype=float)
        X[:, k + 1] = x
    return X


def oscillator_values(k, h, x0, y0, times, W):
    if not k > 0:
        raise ValidationError("stiffness k must be positive")
    W = _as_batch(W)
    w = np.sqrt(k)
    t = times - times[0]
    dW = np.diff(W[..., 0], axis=1)
    C = _left_sum(np.cos(w * t[:-1]) * dW)
    S = _left_sum(np.sin(w * t[:-1]) * dW)
    c, s = np.cos(w * t), np.sin(w * t)
    x = x0 * c + y0 / w * s + h / w * (s * C - c * S)
    y = -x0 * w * s + y0 * c + h * (c * C + s * S)
    return np.stack([x, y], axis=-1)


def oscillator_flow(k, t):
    """``e^{A t}`` for ``A = [[0, 1], [-k, 0]]`` via the cos/sin form."""
    w = np.sqrt(k)
    c, s = np.cos(w * t), np.sin(w * t)
    return np.array([[c, s / w], [-w * s, c]])


def _trajectory(label, path, T, states):
    i0, i1 = path.index(0.0), path.index(T)
    return Trajectory(label, path.times[i0 : i1 + 1].copy(), states[0], path.seed)


def _window(path, T):
    i0, i1 = path.index(0.0), path.index(T)
    if i1 <= i0:
        raise ValidationError("need T > 0")
    return path.times[i0 : i1 + 1], path.values[i0 : i1 + 1]


def ou_solve(params, x0, path, T):
    """``X_t = e^{-bt} x0 + a e^{-bt} int_0^t e^{bs} dW_s``."""
    times, W = _window(path, T)
    return _trajectory("langevin", path, T, ou_values(params.b, params.a, x0, times, W))


def ou_covariance(params, s, t):
    """``Cov(X_s, X_t)`` for ``X_0 ~ N(0, sigma0_sq)`` independent of the noise."""
    if s < 0 or t < 0:
        raise ValidationError("times must be non-negative")
    b, a, v0 = params.b, params.a, params.sigma0_sq
    if b == 0:
        raise SingularParameterError("b = 0 is singular for the OU covariance")
    return v0 * np.exp(-b * (s + t)) + a**2 / (2 * b) * (np.exp(-b * abs(s - t)) - np.exp(-b * (s + t)))


def ou_variance(params, t):
    return ou_covariance(params, t, t)


def gbm_solve(r, alpha, x0, path, T):
    """``X_t = x0 exp((r - alpha^2/2) t + alpha W_t)``."""
    if not x0 > 0:
        raise ValidationError("x0 must be positive")
    times, W = _window(path, T)
    return _trajectory("population", path, T, gbm_values(r, alpha, x0, times, W))


def linear_scalar_solve(a1, a2, b1, b2, x0, path, T):
    """Variation-of-constants solution of ``dX = (a1 X + a2) dt + (b1 X + b2) dW``."""
    times, W = _window(path, T)
    return _trajectory("linear_scalar", path, T, linear_scalar_values(a1, a2, b1, b2, x0, times, W))


def linear_system_solve(params, x0, path, T):
    """``X_t = e^{At} x0 + int e^{A(t-s)} f ds + sum_k int e^{A(t-s)} g_k dW_k``."""
    times, W = _window(path, T)
    return _trajectory("linear_system", path, T, linear_system_values(params, x0, times, W))


def oscillator_solve(k, h, x0, y0, path, T):
    """Stochastic harmonic oscillator ``x'' + k x = h W'`` in ``(x, y = x')``."""
    times, W = _window(path, T)
    return _trajectory("harmonic", path, T, oscillator_values(k, h, x0, y0, times, W))


def exact_solution(model, x0) -> Callable:
    """Batch oracle ``(times, W) -> states`` for a builtin linear model."""
    p = model.params
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if model.label == "langevin":
        return lambda times, W: ou_values(p["b"], p["a"], x0[..., 0], times, W)
    if model.label == "population":
        return lambda times, W: gbm_values(p["r"], p["alpha"], x0[..., 0], times, W)
    if model.label == "linear_scalar":
        return lambda times, W: linear_scalar_values(p["a1"], p["a2"], p["b1"], p["b2"], x0[..., 0], times, W)
    if model.label == "harmonic":
        return lambda times, W: oscillator_values(p["k"], p["h"], x0[0], x0[1], times, W)
    if model.label in ("linear_system", "oscillator"):
        A = model.params.get("A")
        if A is None:
            A = np.array([[0.0, 1.0], [-p["b"], -p["a"]]])
            params = LinearSystemParams(A, np.zeros(2), [np.array([0.0, p["sigma"]])])
        else:
            params = LinearSystemParams(A, p["f"], p["g"])
        return lambda times, W: linear_system_values(params, x0, times, W)
    raise CapabilityError(f"no closed form for model {model.label!r}")
