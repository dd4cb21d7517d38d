"""Almost-sure invariance of level sets ``{G = 0}`` and their construction.

A manifold ``M = {G = 0}`` is invariant for ``dX = b dt + sigma dW`` when both
``<mu, grad G>`` and every ``<sigma^j, grad G>`` vanish on ``M``, with
``mu = b - 1/2 sum_j (D sigma^j) sigma^j``.  The invariance equations are
first-order linear PDEs in ``G``, solved here by characteristics.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _rng
from .brownian import grid_steps, sample_block
from .errors import CapabilityError, EnsembleFailure, ValidationError
from .integrators import CHUNK, Trajectory, integrate_block
from .models import ito_to_stratonovich_drift

PROBE_TOL = 1e-5
NONCHAR_TOL = 1e-8
ANALYTIC_ZERO = 1e-10
FD_ZERO = 1e-6


@dataclass(frozen=True)
class ManifoldSpec:
    """Level set ``G(x) = 0`` with gradient; both vectorized over leading axes."""

    G: Callable
    grad_G: Callable
    label: str = "manifold"
    n: Optional[int] = None
    validate: bool = True

    def __post_init__(self):
        if self.validate and self.n is not None:
            err = self.gradient_probe_error()
            if err > PROBE_TOL:
                raise ValidationError(f"{self.label}: gradient disagrees with finite differences ({err:.2e})")

    def gradient_probe_error(self, points=None, step=1e-6):
        pts = np.random.default_rng(0).uniform(-1, 1, (8, self.n)) if points is None else np.atleast_2d(points)
        given = np.asarray(self.grad_G(pts), dtype=float)
        approx = np.empty_like(given)
        for k in range(pts.shape[1]):
            e = np.zeros(pts.shape[1])
            e[k] = step
            approx[:, k] = (np.asarray(self.G(pts + e)) - np.asarray(self.G(pts - e))) / (2 * step)
        return float(np.abs(given - approx).max() / max(1.0, np.abs(approx).max()))

    def scaled(self, lam):
        return ManifoldSpec(lambda x: lam * np.asarray(self.G(x)), lambda x: lam * np.asarray(self.grad_G(x)),
                            f"{lam:g}*{self.label}", self.n, validate=False)


def circle_spec(radius=1.0):
    return ManifoldSpec(
        G=lambda x: np.sum(np.square(x), axis=-1) - radius**2,
        grad_G=lambda x: 2.0 * np.asarray(x, dtype=float),
        label=f"circle(r={radius:g})", n=2,
    )


def ellipse_spec(c=1.0):
    """Non-invariant control ``x^2 + 2 y^2 - c`` for the circle system."""
    w = np.array([1.0, 2.0])
    return ManifoldSpec(
        G=lambda x: np.sum(w * np.square(x), axis=-1) - c,
        grad_G=lambda x: 2.0 * w * np.asarray(x, dtype=float),
        label=f"ellipse(c={c:g})", n=2,
    )


def tangency_residual(model, spec, x, t=0.0):
    """``(<mu, grad G>, [<sigma^j, grad G>]_j)`` at ``x`` (batched over leading axes)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValidationError("x must be finite")
    grad = np.asarray(spec.grad_G(x), dtype=float)
    mu = ito_to_stratonovich_drift(model, x, t)  # raises CapabilityError without Jacobians
    s = model.diffusion(x, t)
    r_mu = np.sum(mu * grad, axis=-1)
    r_sigma = np.einsum("...ij,...i->...j", s, grad)
    return r_mu, r_sigma


def zero_threshold(model):
    return FD_ZERO if model.jacobians_from_fd else ANALYTIC_ZERO


# ---------------------------------------------------------------------------
# method of characteristics


@dataclass
class CharacteristicField:
    """Quasi-linear first-order PDE ``a(x, u) . grad u = c(x, u)`` with data on ``gamma0``.

    ``a(x, u)`` maps ``(k, n), (k,) -> (k, n)``; ``c(x, u)`` maps to ``(k,)``;
    ``gamma0(s)`` maps parameters ``(k, n-1)`` to ``(x (k, n), u (k,))``.
    """

    a: Callable
    c: Callable
    gamma0: Callable
    n: int

    def rhs(self, x, u):
        return np.asarray(self.a(x, u), dtype=float), np.asarray(self.c(x, u), dtype=float)


def _params(s_grid, n):
    s = np.asarray(s_grid, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[1] != n - 1 or s.shape[0] == 0:
        raise ValidationError(f"parameter grid must be non-empty with {n - 1} columns")
    return s


def _lift(field, s):
    x, u = field.gamma0(s)
    return np.asarray(x, dtype=float).reshape(len(s), field.n), np.asarray(u, dtype=float).reshape(len(s))


@dataclass
class NoncharacteristicReport:
    ok: bool
    singular_values: np.ndarray
    failing: np.ndarray  # indices of failing samples

    def __bool__(self):
        return bool(self.ok)


def noncharacteristic_check(field, s_grid, tol=NONCHAR_TOL, step=1e-6):
    """Transversality of ``(a, c)`` to the tangent space of ``gamma0`` at each sample.

    The tangents (finite differences in each parameter) and ``(a, c)`` are
    normalized and stacked; the smallest singular value measures how far
    ``(a, c)`` is from the tangent space.
    """
    s = _params(s_grid, field.n)
    x, u = _lift(field, s)
    vecs = []
    for k in range(s.shape[1]):
        e = np.zeros(s.shape[1])
        e[k] = step
        xp, up = _lift(field, s + e)
        xm, um = _lift(field, s - e)
        tan = np.concatenate([xp - xm, (up - um)[:, None]], axis=1) / (2 * step)
        norms = np.linalg.norm(tan, axis=1)
        if np.any(norms < 1e-12):
            raise ValidationError("degenerate tangent of gamma0")
        vecs.append(tan / norms[:, None])
    a, c = field.rhs(x, u)
    ac = np.concatenate([a, c[:, None]], axis=1)
    norms = np.linalg.norm(ac, axis=1)
    unit = np.divide(ac, norms[:, None], out=np.zeros_like(ac), where=norms[:, None] > 0)
    stack = np.stack(vecs + [unit], axis=1)  # (k, n, n+1)
    sv = np.linalg.svd(stack, compute_uv=False)[:, -1]
    failing = np.flatnonzero(sv < tol)
    return NoncharacteristicReport(failing.size == 0, sv, failing)


@dataclass
class CharacteristicSurface:
    params: np.ndarray     # (k, n-1)
    times: np.ndarray      # (N,) curve parameter, 0 at gamma0
    x: np.ndarray          # (k, N, n)
    u: np.ndarray          # (k, N)
    valid: np.ndarray      # (k, N) False once a curve has left the bounding box
    truncated: np.ndarray  # (k,)


def characteristics_solve(field, s_grid, t_span, dt, bbox=None, check=True):
    """RK4 along ``dx/dt = a``, ``du/dt = c`` from every ``gamma0`` sample, both directions."""
    s = _params(s_grid, field.n)
    t_lo, t_hi = float(t_span[0]), float(t_span[1])
    if not t_lo <= 0 <= t_hi or t_lo == t_hi:
        raise ValidationError("t_span must bracket 0")
    if check:
        rep = noncharacteristic_check(field, s)
        if not rep:
            raise ValidationError(
                f"gamma0 is characteristic at {rep.failing.size} samples "
                f"(smallest singular value {rep.singular_values.min():.2e})"
            )
    n_back, n_fwd = grid_steps(-t_lo, dt), grid_steps(t_hi, dt)
    x0, u0 = _lift(field, s)
    fwd_x, fwd_u = _rk4_curves(field, x0, u0, dt, n_fwd)
    bwd_x, bwd_u = _rk4_curves(field, x0, u0, -dt, n_back)
    X = np.concatenate([bwd_x[:, :0:-1], fwd_x], axis=1)
    U = np.concatenate([bwd_u[:, :0:-1], fwd_u], axis=1)
    times = dt * (np.arange(X.shape[1]) - n_back)
    valid = np.all(np.isfinite(X), axis=-1) & np.isfinite(U)
    if bbox is not None:
        box = np.asarray(bbox, dtype=float).reshape(field.n, 2)
        inside = np.all((X >= box[:, 0]) & (X <= box[:, 1]), axis=-1)
        # a curve is cut at the first exit on either side of gamma0
        fwd_ok = np.logical_and.accumulate(inside[:, n_back:], axis=1)
        bwd_ok = np.logical_and.accumulate(inside[:, n_back::-1], axis=1)[:, ::-1]
        valid &= np.concatenate([bwd_ok[:, :-1], fwd_ok], axis=1)
    truncated = ~np.all(valid, axis=1)
    return CharacteristicSurface(s, times, X, U, valid, truncated)


def _rk4_curves(field, x, u, h, steps):
    xs = np.empty((x.shape[0], steps + 1, x.shape[1]))
    us = np.empty((x.shape[0], steps + 1))
    xs[:, 0], us[:, 0] = x, u
    with np.errstate(all="ignore"):
        for k in range(steps):
            a1, c1 = field.rhs(x, u)
            a2, c2 = field.rhs(x + 0.5 * h * a1, u + 0.5 * h * c1)
            a3, c3 = field.rhs(x + 0.5 * h * a2, u + 0.5 * h * c2)
            a4, c4 = field.rhs(x + h * a3, u + h * c3)
            x = x + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
            u = u + h / 6 * (c1 + 2 * c2 + 2 * c3 + c4)
            xs[:, k + 1], us[:, k + 1] = x, u
    return xs, us


@dataclass
class ZeroSet:
    points: np.ndarray
    notice: Optional[str] = None

    def __len__(self):
        return len(self.points)


def _interp_sign_changes(xa, xb, ua, ub):
    hit = (ua * ub < 0) | ((ua == 0) & np.isfinite(ub))
    w = np.zeros_like(ua)
    np.divide(ua, ua - ub, out=w, where=hit & (ua != ub))
    return hit, xa + w[..., None] * (xb - xa)


def extract_zero_set(surface, across=True):
    """Points where ``u`` changes sign, interpolated along curves and between neighbours.

    Across-curve interpolation pairs nodes with the same curve parameter on
    adjacent samples of a one-dimensional parameter grid.
    """
    X, U, V = surface.x, surface.u, surface.valid
    pts = []
    ok = V[:, :-1] & V[:, 1:]
    hit, p = _interp_sign_changes(X[:, :-1], X[:, 1:], U[:, :-1], U[:, 1:])
    pts.append(p[hit & ok])
    last = V[:, -1] & (U[:, -1] == 0)
    pts.append(X[:, -1][last])
    if across and surface.params.shape[1] == 1 and X.shape[0] > 1:
        order = np.argsort(surface.params[:, 0])
        Xo, Uo, Vo = X[order], U[order], V[order]
        ok = Vo[:-1] & Vo[1:]
        hit, p = _interp_sign_changes(Xo[:-1], Xo[1:], Uo[:-1], Uo[1:])
        pts.append(p[hit & ok])
    points = np.concatenate(pts) if pts else np.empty((0, X.shape[-1]))
    notice = None
    if points.shape[0] == 0:
        notice = "u has no sign change: the initial data does not reach the level set u = 0"
    return ZeroSet(points, notice)


def invariance_characteristic_field(model, column, gamma0):
    """Characteristic field of ``<sigma^column, grad G> = 0`` (``a = sigma^j``, ``c = 0``)."""
    if not 0 <= column < model.m:
        raise ValidationError("diffusion column out of range")
    return CharacteristicField(
        a=lambda x, u: model.diffusion(x)[..., column],
        c=lambda x, u: np.zeros(np.shape(u)),
        gamma0=gamma0,
        n=model.n,
    )


def circle_benchmark_surface(s_grid=None, t_span=(-3.2, 3.2), dt=1e-3):
    """Rotation characteristics from data ``u = s - 1`` on the segment ``(s, 0)``."""
    from .models import circle_manifold

    if s_grid is None:
        s_grid = np.linspace(0.55, 1.45, 10)  # avoids s = 1 on purpose

    def gamma0(s):
        s = np.asarray(s, dtype=float)[..., 0]
        return np.stack([s, np.zeros_like(s)], axis=-1), s - 1.0

    field = invariance_characteristic_field(circle_manifold(), 0, gamma0)
    return characteristics_solve(field, s_grid, t_span, dt)


# ---------------------------------------------------------------------------
# simulation


@dataclass
class InvarianceReport:
    label: str
    dts: np.ndarray
    median_max: np.ndarray
    mean_max: np.ndarray
    median_terminal: np.ndarray
    n_paths: int

    @property
    def ratios(self):
        """Successive ``median max|G|`` ratios, coarse over fine."""
        return self.median_max[:-1] / self.median_max[1:]

    def to_record(self):
        return {
            "label": self.label,
            "dt": [float(d) for d in self.dts],
            "median_max_abs_G": [float(v) for v in self.median_max],
            "mean_max_abs_G": [float(v) for v in self.mean_max],
            "median_terminal_abs_G": [float(v) for v in self.median_terminal],
            "ratios": [float(r) for r in self.ratios],
            "n_paths": self.n_paths,
        }


def manifold_invariance_mc(model, spec, x0, n_paths, dt, T, master_seed=42, levels=3,
                           scheme="milstein"):
    """Drift of ``|G(X_t)|`` off the manifold for ``dt, dt/2, ...``.

    All levels subsample the same finest Brownian nodes.
    """
    x0 = np.asarray(x0, dtype=float)
    if abs(float(spec.G(x0))) > ANALYTIC_ZERO:
        raise ValidationError("x0 must lie on the manifold (|G(x0)| <= 1e-10)")
    if levels < 1:
        raise ValidationError("levels must be >= 1")
    fine = dt / 2 ** (levels - 1)
    n_fine = grid_steps(T, fine)
    seeds = _rng.derive_seeds(master_seed, n_paths)
    maxes = [[] for _ in range(levels)]
    terms = [[] for _ in range(levels)]
    for lo in range(0, n_paths, CHUNK):
        Wf = sample_block(seeds[lo : lo + CHUNK], model.m, n_fine, fine)
        for lev in range(levels):
            f = 2 ** (levels - 1 - lev)
            X, blown = integrate_block(model, x0, Wf[:, ::f], 0.0, fine * f, scheme)
            if not np.all(np.isnan(blown)):
                raise EnsembleFailure("blow-up during invariance simulation")
            g = np.abs(np.asarray(spec.G(X)))
            maxes[lev].append(g.max(axis=1))
            terms[lev].append(g[:, -1])
    mx = [np.concatenate(v) for v in maxes]
    tm = [np.concatenate(v) for v in terms]
    dts = dt / 2.0 ** np.arange(levels)
    return InvarianceReport(spec.label, dts, np.array([np.median(v) for v in mx]),
                            np.array([v.mean() for v in mx]), np.array([np.median(v) for v in tm]),
                            n_paths)


def restrict_circle(model, theta0, path, T=None):
    """Reduced dynamics on the unit circle: ``theta = theta0 + W_t`` lifted to ``(cos, sin)``."""
    if model.label != "circle_manifold":
        raise CapabilityError("restriction is only available for the circle benchmark")
    T = path.t_max if T is None else T
    i0, i1 = path.index(0.0), path.index(T)
    theta = theta0 + path.values[i0 : i1 + 1, 0]
    states = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    return Trajectory("circle_restricted", path.times[i0 : i1 + 1].copy(), states, path.seed)
