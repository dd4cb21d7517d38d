"""Cocycle and stationary-orbit checks on discrete two-sided paths.

Solution operators ``phi(t, path, x)`` read the path on ``[0, t]`` only, so
``phi(t, wiener_shift(path, s), y)`` is the solution driven by the shifted
noise.  Both sides of every identity are evaluated on the same stored path.

For the linear additive model ``dX = -b X dt + a dW`` the pathwise solver
uses the integrated-by-parts form

    X_t = e^{-bt} x + a (W_t - b int_0^t e^{-b(t-r)} W_r dr),

which is defined for every continuous path.  The ``dr`` integral is a
left-point Riemann sum, the source of the O(dt) cocycle defect.

Periodic random orbits are not implemented: there is no constructive
instance to check them against.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .brownian import grid_steps, sample_path, wiener_shift
from .closed_form import exact_solution
from .errors import GridRangeError, ValidationError
from .integrators import SCHEMES, rk4
from .stats import RunningMoments, Z3


@dataclass(frozen=True)
class CocycleSolver:
    """Solution operator ``phi(t, path, x)`` started at time 0 of ``path``."""

    phi: Callable
    label: str = "solver"

    def __call__(self, t, path, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if t == 0:
            return x.copy()
        if t < 0:
            raise ValidationError("t must be non-negative")
        return np.atleast_1d(np.asarray(self.phi(t, path, x), dtype=float))


def _window(path, t):
    i0, i1 = path.index(0.0), path.index(t)
    return path.values[i0 : i1 + 1]


def pathwise_linear_solver(b=-1.0, a=1.0):
    """Pathwise solver of ``dX = -b X dt + a dW``; ``b = -1`` gives ``dX = X dt + dW``."""

    def phi(t, path, x):
        W = _window(path, t)[:, 0]
        r = path.dt * np.arange(W.size - 1)
        conv = np.sum(np.exp(-b * (t - r)) * W[:-1]) * path.dt
        return np.exp(-b * t) * x + a * (W[-1] - b * conv)

    return CocycleSolver(phi, f"pathwise_linear(b={b:g},a={a:g})")


def closed_form_solver(model):
    """Wrap a :func:`exact_solution` oracle (left-point Ito sums) as a solver."""

    def phi(t, path, x):
        W = _window(path, t)
        times = path.dt * np.arange(W.shape[0])
        return exact_solution(model, x)(times, W[None])[0, -1]

    return CocycleSolver(phi, f"closed_form({model.label})")


def scheme_solver(model, scheme="em"):
    step = SCHEMES[scheme]
    return CocycleSolver(lambda t, path, x: step(model, x, path, 0.0, t).terminal, f"{scheme}({model.label})")


def rk4_solver(model, substeps=1):
    """Noise-free RK4 flow on the path grid (the path only sets ``dt``)."""

    def phi(t, path, x):
        _window(path, t)
        return rk4(model.drift, x, 0.0, t, path.dt / substeps)[1][-1]

    return CocycleSolver(phi, f"rk4({model.label})")


def cocycle_check(solver, t, s, x, path):
    """``|phi(t+s, w, x) - phi(t, theta_s w, phi(s, w, x))|``."""
    if t < 0 or s < 0:
        raise ValidationError("t and s must be non-negative")
    path.index(t + s)  # window check
    lhs = solver(t + s, path, x)
    rhs = solver(t, wiener_shift(path, s), solver(s, path, x))
    return float(np.linalg.norm(lhs - rhs))


def default_truncation(b):
    return 20.0 / b


def ou_stationary_orbit(path, b, T_trunc=None):
    """Left-point sum of ``int_{-T}^0 e^{bs} dW_s`` on ``path``."""
    if not b > 0:
        raise ValidationError("b must be positive")
    T = default_truncation(b) if T_trunc is None else T_trunc
    if not T > 0:
        raise ValidationError("T_trunc must be positive")
    if path.t_min > -T + 1e-12 * T:
        raise GridRangeError(f"path window starts at {path.t_min:g}, need {-T:g}")
    i0, i1 = path.index(-T), path.index(0.0)
    W = path.values[i0 : i1 + 1, 0]
    s = path.times[i0:i1]
    return float(np.sum(np.exp(b * s) * np.diff(W)))


def stationary_orbit_check(path, b, t, T_trunc=None):
    """``|phi(t, w, Y(w)) - Y(theta_t w)|`` for ``dX = -b X dt + dW``."""
    if t < 0:
        raise ValidationError("t must be non-negative")
    solver = pathwise_linear_solver(b, 1.0)
    y = ou_stationary_orbit(path, b, T_trunc)
    lhs = solver(t, path, y)[0]
    rhs = ou_stationary_orbit(wiener_shift(path, t), b, T_trunc)
    return float(abs(lhs - rhs))


def residual_order(residual_fn, dts):
    """Least-squares slope of ``log residual`` against ``log dt``."""
    dts = np.asarray(dts, dtype=float)
    res = np.array([residual_fn(d) for d in dts])
    if np.any(res <= 0):
        return dts, res, float("nan")
    slope, _ = np.polyfit(np.log(dts), np.log(res), 1)
    return dts, res, float(slope)


def _nested_paths(seeds, t_min, t_max, dts):
    # every step size coarsens one fine path per seed, so all levels share nodes
    fine = min(dts)
    paths = [sample_path(sd, 1, t_min, t_max, fine) for sd in seeds]
    return {d: [p.coarsen(grid_steps(d, fine)) for p in paths] for d in dts}


def cocycle_order(solver, t, s, x, dts, seeds):
    """Order fit of the seed-averaged cocycle residual over nested step sizes."""
    paths = _nested_paths(seeds, 0.0, t + s, dts)
    return residual_order(lambda d: np.mean([cocycle_check(solver, t, s, x, p) for p in paths[d]]), dts)


def stationary_orbit_order(b, t, dts, seeds, T_trunc=None):
    """Order fit of the seed-averaged stationary-orbit residual over nested step sizes."""
    T = default_truncation(b) if T_trunc is None else T_trunc
    paths = _nested_paths(seeds, -T, t, dts)
    return residual_order(lambda d: np.mean([stationary_orbit_check(p, b, t, T) for p in paths[d]]), dts)


@dataclass
class VarianceReport:
    b: float
    variance: float
    se: float
    target: float
    n: int

    @property
    def passed(self):
        return abs(self.variance - self.target) <= Z3 * self.se

    def to_record(self):
        return {"check": "stationary_variance", "b": self.b, "variance": self.variance,
                "se": self.se, "target": self.target, "n": self.n, "pass": bool(self.passed)}


def stationary_variance_check(b, seeds, dt=1e-3, T_trunc=None):
    """Ensemble variance of ``Y`` against ``1 / (2b)``."""
    T = default_truncation(b) if T_trunc is None else T_trunc
    ys = np.array([ou_stationary_orbit(sample_path(sd, 1, -T, 0.0, dt), b, T) for sd in seeds])
    mom = RunningMoments.from_samples(ys)
    return VarianceReport(b, float(mom.variance()), float(mom.variance_std_error()), 1.0 / (2 * b), ys.size)
