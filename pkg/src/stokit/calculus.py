"""Ito/Stratonovich sums on realized paths and Monte Carlo identity checks.

Integrands are plain arrays aligned with a path grid.  Samplers used by the
checks are callables ``f(t, W)`` receiving node times ``(nodes,)`` and scalar
Brownian values ``(paths, nodes)`` and returning ``(paths, nodes)`` values;
``f(t, W)`` must only use values up to ``t`` (non-anticipating).
"""

from dataclasses import dataclass

import numpy as np

from . import _rng
from .brownian import grid_steps, sample_block
from .errors import DataError, ValidationError
from .integrators import integrate_block
from .stats import Z3

MIN_PATHS = 1000


@dataclass(frozen=True)
class IdentityReport:
    check: str
    lhs: float
    rhs: float
    se: float
    n: int
    kind: str = "identity"  # "identity": |lhs - rhs| <= 3 se; "bound": lhs <= rhs + 3 se

    @property
    def passed(self):
        if self.kind == "bound":
            return self.lhs <= self.rhs + Z3 * self.se
        return abs(self.lhs - self.rhs) <= Z3 * self.se

    def to_record(self):
        return {"check": self.check, "lhs": self.lhs, "rhs": self.rhs,
                "se": self.se, "n": self.n, "pass": bool(self.passed)}


def _cells(path, a, b):
    i, j = path.index(a), path.index(b)
    if j <= i:
        raise ValidationError("need a < b")
    return i, j


def _aligned(f, path):
    f = np.asarray(f, dtype=float)
    if f.shape[0] != path.n_nodes:
        raise ValidationError(f"integrand has {f.shape[0]} nodes, path has {path.n_nodes}")
    if not np.all(np.isfinite(f)):
        raise DataError("integrand contains non-finite values")
    return f


def _contract(f, dW):
    if f.ndim == 1:
        if dW.shape[1] != 1:
            raise ValidationError("scalar integrand needs a scalar Brownian path")
        return np.sum(f * dW[:, 0])
    return np.einsum("jim,jm->i", f, dW)


def ito_integral(f, path, a, b):
    """Left-point sum ``sum_j f(t_j) (W_{t_{j+1}} - W_{t_j})`` over ``[a, b]``.

    ``f`` is ``(nodes,)`` for scalar noise or ``(nodes, n, m)`` for the matrix case.
    For ``f = W`` the sum is exactly ``(W_b^2 - W_a^2)/2 - sum (dW)^2 / 2``, so it
    tends to ``(W_b^2 - W_a^2)/2 - (b - a)/2``: the later endpoint carries the plus sign.
    """
    f = _aligned(f, path)
    i, j = _cells(path, a, b)
    return _contract(f[i:j], np.diff(path.values[i : j + 1], axis=0))


def stratonovich_integral(f, path, a, b):
    """Midpoint sum with ``f`` at cell midpoints taken as the average of adjacent nodes."""
    f = _aligned(f, path)
    i, j = _cells(path, a, b)
    mid = 0.5 * (f[i:j] + f[i + 1 : j + 1])
    return _contract(mid, np.diff(path.values[i : j + 1], axis=0))


def _scalar_block(n_paths, T, dt, master_seed):
    seeds = _rng.derive_seeds(master_seed, n_paths)
    n = grid_steps(T, dt)
    W = sample_block(seeds, 1, n, dt)[..., 0]
    return dt * np.arange(n + 1), W


def _sample(f, t, W):
    vals = np.broadcast_to(np.asarray(f(t, W), dtype=float), W.shape)
    if not np.all(np.isfinite(vals)):
        raise DataError("sampler produced non-finite values")
    return vals


def _report(check, lhs_samples, rhs_samples, kind="identity"):
    d = lhs_samples - rhs_samples
    n = d.size
    se = float(np.std(d, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return IdentityReport(check, float(lhs_samples.mean()), float(rhs_samples.mean()), se, n, kind)


def _need_paths(n_paths):
    if n_paths < MIN_PATHS:
        raise ValidationError(f"need at least {MIN_PATHS} paths")


def isometry_check(f, T=1.0, n_paths=10_000, dt=1e-3, master_seed=42, name="isometry"):
    """Compare ``E (int_0^T f dW)^2`` with ``E int_0^T f^2 dt``."""
    _need_paths(n_paths)
    t, W = _scalar_block(n_paths, T, dt, master_seed)
    fv = _sample(f, t, W)[:, :-1]
    dW = np.diff(W, axis=1)
    ito = np.sum(fv * dW, axis=1)
    return _report(name, ito**2, np.sum(fv * fv, axis=1) * dt)


def generalized_isometry_check(f, g, a, b, n_paths=10_000, dt=1e-3, master_seed=42,
                               name="generalized_isometry"):
    """Compare ``E[int_0^a f dW * int_0^b g dW]`` with ``E int_0^{min(a,b)} f g dt``."""
    if not (a > 0 and b > 0):
        raise ValidationError("a and b must be positive")
    _need_paths(n_paths)
    t, W = _scalar_block(n_paths, max(a, b), dt, master_seed)
    ia, ib = grid_steps(a, dt), grid_steps(b, dt)
    fv, gv = _sample(f, t, W), _sample(g, t, W)
    dW = np.diff(W, axis=1)
    I_f = np.sum(fv[:, :ia] * dW[:, :ia], axis=1)
    I_g = np.sum(gv[:, :ib] * dW[:, :ib], axis=1)
    k = min(ia, ib)
    return _report(name, I_f * I_g, np.sum(fv[:, :k] * gv[:, :k], axis=1) * dt)


def _running(f, t0, T, n_paths, dt, master_seed):
    if not T > t0 >= 0:
        raise ValidationError("need 0 <= t0 < T")
    t, W = _scalar_block(n_paths, T, dt, master_seed)
    i0 = grid_steps(t0, dt)
    fv = _sample(f, t, W)[:, i0:-1]
    dW = np.diff(W[:, i0:], axis=1)
    running = np.cumsum(fv * dW, axis=1)
    sup = np.max(np.abs(running), axis=1)
    energy = np.sum(fv * fv, axis=1) * dt
    return sup, energy


def doob_bound_check(f, lam, t0=0.0, T=1.0, n_paths=10_000, dt=1e-3, master_seed=42, name="doob"):
    """``P(sup |int_{t0}^t f dW| >= lam) <= E int_{t0}^T f^2 dt / lam^2``; sup over grid nodes."""
    if not lam > 0:
        raise ValidationError("lambda must be positive")
    _need_paths(n_paths)
    sup, energy = _running(f, t0, T, n_paths, dt, master_seed)
    return _report(name, (sup >= lam).astype(float), energy / lam**2, kind="bound")


def second_moment_sup_check(f, t0=0.0, T=1.0, n_paths=10_000, dt=1e-3, master_seed=42,
                            name="sup_second_moment"):
    """``E sup |int_{t0}^t f dW|^2 <= 4 E int_{t0}^T f^2 dt``; sup over grid nodes."""
    _need_paths(n_paths)
    sup, energy = _running(f, t0, T, n_paths, dt, master_seed)
    return _report(name, sup**2, 4.0 * energy, kind="bound")


def ito_stratonovich_gap_rms(dts, T=1.0, n_paths=2000, master_seed=42):
    """RMS over paths of ``(Strat - Ito)[int W dW] - T/2`` for each step size.

    All step sizes subsample one fine path per realization.
    """
    dts = np.asarray(sorted(dts))
    t, W = _scalar_block(n_paths, T, dts[0], master_seed)
    out = []
    for d in dts:
        Wc = W[:, :: grid_steps(d, dts[0])]
        dW = np.diff(Wc, axis=1)
        ito = np.sum(Wc[:, :-1] * dW, axis=1)
        strat = np.sum(0.5 * (Wc[:, :-1] + Wc[:, 1:]) * dW, axis=1)
        out.append(np.sqrt(np.mean((strat - ito - 0.5 * T) ** 2)))
    return dts, np.array(out)


def ito_formula_gaps(model, obs, x0, times, W):
    """Terminal gap between ``g(T, X_T)`` and the Ito-formula integral form.

    ``X`` is the Euler-Maruyama solution on the node values ``W`` of shape
    ``(paths, nodes, m)``; drift, correction and stochastic-integral terms are
    accumulated on the same grid.
    """
    W = np.asarray(W, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[-1] != model.n:
        raise ValidationError("initial state does not match the model dimension")
    dt = times[1] - times[0]
    X, blown = integrate_block(model, x0, W, times[0], dt)
    dW = np.diff(W, axis=1)
    total = np.asarray(obs.g(times[0], X[:, 0]), dtype=float)
    for k in range(len(times) - 1):
        t, x = times[k], X[:, k]
        grad = np.asarray(obs.gradient(t, x))
        hess = np.asarray(obs.hessian(t, x))
        s = model.diffusion(x, t)
        cov = s @ np.swapaxes(s, -1, -2)
        rate = (obs.g_t(t, x) + np.sum(grad * model.drift(x, t), axis=-1)
                + 0.5 * np.einsum("pij,pji->p", cov, hess))
        total = total + rate * dt + np.einsum("pi,pij,pj->p", grad, s, dW[:, k])
    return np.abs(np.asarray(obs.g(times[-1], X[:, -1])) - total)


def ito_formula_residual(model, obs, path, x0, T=None):
    """Ito-formula gap for one path over ``[0, T]`` (``T`` defaults to the path end)."""
    T = path.t_max if T is None else T
    i0, i1 = path.index(0.0), path.index(T)
    return float(ito_formula_gaps(model, obs, x0, path.times[i0 : i1 + 1], path.values[None, i0 : i1 + 1])[0])


def product_rule_residual(X, Y):
    """Terminal gap of ``d(XY) = X dY + Y dX + dX dY`` summed over the grid."""
    if hasattr(X, "times") and hasattr(Y, "times"):
        if X.times.shape != Y.times.shape or not np.array_equal(X.times, Y.times):
            raise ValidationError("trajectories live on different grids")
        X, Y = X.states, Y.states
    X = np.asarray(X, dtype=float).reshape(len(X), -1)[:, 0]
    Y = np.asarray(Y, dtype=float).reshape(len(Y), -1)[:, 0]
    if X.shape != Y.shape:
        raise ValidationError("trajectories have different lengths")
    dX, dY = np.diff(X), np.diff(Y)
    increments = X[:-1] * dY + Y[:-1] * dX + dX * dY
    return float(abs(X[-1] * Y[-1] - X[0] * Y[0] - np.sum(increments)))


# common integrands
def const_one(t, W):
    return np.ones_like(W)


def identity_time(t, W):
    return np.broadcast_to(t, W.shape)


def brownian_self(t, W):
    return W


def standard_checks(n_paths=10_000, dt=1e-3, master_seed=42):
    """Battery run by the ``calculus`` experiment."""
    integrands = {"1": const_one, "t": identity_time, "W": brownian_self}
    reports = []
    for label, f in integrands.items():
        reports.append(isometry_check(f, 1.0, n_paths, dt, master_seed, name=f"isometry[f={label}]"))
        reports.append(generalized_isometry_check(
            f, f, 1.0, 2.0, n_paths, dt, master_seed, name=f"generalized_isometry[f={label},a=1,b=2]"))
    reports.append(generalized_isometry_check(
        const_one, lambda t, W: -np.ones_like(W), 1.0, 1.0, n_paths, dt, master_seed,
        name="generalized_isometry[f=1,g=-1]"))
    for lam in (1.0, 2.0):
        reports.append(doob_bound_check(const_one, lam, 0.0, 1.0, n_paths, dt, master_seed,
                                        name=f"doob[f=1,lambda={lam:g}]"))
    reports.append(doob_bound_check(brownian_self, 0.5, 0.0, 1.0, n_paths, dt, master_seed,
                                    name="doob[f=W,lambda=0.5]"))
    reports.append(second_moment_sup_check(const_one, 0.0, 1.0, n_paths, dt, master_seed,
                                           name="sup_second_moment[f=1]"))
    reports.append(second_moment_sup_check(brownian_self, 0.0, 1.0, n_paths, dt, master_seed,
                                           name="sup_second_moment[f=W]"))
    return reports
