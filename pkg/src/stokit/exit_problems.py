"""Escape probability and mean residence time on rectangular 1D/2D domains.

The generator ``A g = b . grad g + 1/2 Tr(sigma sigma^T D^2 g)`` is discretized
with central differences; on any axis where central drift differencing would
break the M-matrix sign pattern (``|b_i| h_i > (sigma sigma^T)_ii``) the drift
switches to first-order upwinding.  A mixed term ``c = (sigma sigma^T)_01``
uses the 7-point stencil along the diagonal with the sign of ``c``, which stays
monotone when ``|c| <= min(D_00 h_y/h_x, D_11 h_x/h_y)`` (diagonal dominance on
square cells); the axis diffusion it borrows enters the upwinding test.  Monte Carlo first-exit simulation provides
the independent cross-check.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import RegularGridInterpolator

from . import _rng
from .brownian import increment_block
from .integrators import CHUNK
from .errors import (CensoringError, SingularOperatorError, UndefinedQuantileError,
                     ValidationError)

SIDES = {1: ("left", "right"), 2: ("left", "right", "bottom", "top")}
DIRECT_LIMIT = 100_000
ITER_TOL = 1e-10
MAX_CENSORED = 0.10
BLOCK_STEPS = 1024
# Overshoot constant of discretely monitored Brownian motion, -zeta(1/2)/sqrt(2 pi).
# Node-only exit detection acts like a boundary pushed out by about this many
# sigma sqrt(dt); frozen here and used as the MC bias allowance.
MONITORING_BIAS = 0.5826


def monitoring_bias(dt, sigma=1.0):
    """Allowance ``MONITORING_BIAS * sigma * sqrt(dt)`` for node-only exit detection."""
    return MONITORING_BIAS * sigma * np.sqrt(dt)


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box with grid spacing ``h`` and a Dirichlet part ``gamma`` of its boundary.

    ``gamma`` is a tuple of side names (``left``/``right`` on the first axis,
    ``bottom``/``top`` on the second), ``"all"``, or a callable mapping boundary
    points ``(k, d)`` to booleans.
    """

    bounds: tuple
    h: tuple
    gamma: Union[tuple, Callable] = ("right",)

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in np.atleast_2d(self.bounds))
        d = len(bounds)
        if d not in (1, 2):
            raise ValidationError("only 1D and 2D domains are supported")
        h = tuple(float(v) for v in np.broadcast_to(np.atleast_1d(self.h), (d,)))
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "h", h)
        gamma = self.gamma
        if isinstance(gamma, str):
            gamma = SIDES[d] if gamma == "all" else tuple(g.strip() for g in gamma.split(",") if g.strip())
        if not callable(gamma):
            gamma = tuple(gamma)
            unknown = set(gamma) - set(SIDES[d])
            if unknown:
                raise ValidationError(f"unknown boundary sides {sorted(unknown)} for a {d}D domain")
        object.__setattr__(self, "gamma", gamma)
        for (lo, hi), step in zip(bounds, h):
            if not hi > lo:
                raise ValidationError("each axis needs lo < hi")
            if not step > 0:
                raise ValidationError("grid spacing must be positive")
            cells = (hi - lo) / step
            if abs(cells - round(cells)) > 1e-9 * max(1.0, cells):
                raise ValidationError(f"h={step} does not divide [{lo}, {hi}]")
        if not np.any(self.interior_mask):
            raise ValidationError("domain has no interior nodes")

    @property
    def dim(self):
        return len(self.bounds)

    @property
    def shape(self):
        return tuple(int(round((hi - lo) / h)) + 1 for (lo, hi), h in zip(self.bounds, self.h))

    @property
    def axes(self):
        return [lo + h * np.arange(n) for (lo, _), h, n in zip(self.bounds, self.h, self.shape)]

    @property
    def volume(self):
        return float(np.prod([hi - lo for lo, hi in self.bounds]))

    @property
    def points(self):
        grids = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def _side_masks(self):
        idx = np.indices(self.shape)
        masks = {}
        for axis, (lo_name, hi_name) in enumerate(zip(SIDES[self.dim][::2], SIDES[self.dim][1::2])):
            masks[lo_name] = idx[axis] == 0
            masks[hi_name] = idx[axis] == self.shape[axis] - 1
        return masks

    @property
    def boundary_mask(self):
        return np.logical_or.reduce(list(self._side_masks().values()))

    @property
    def interior_mask(self):
        return ~self.boundary_mask

    @property
    def gamma_mask(self):
        boundary = self.boundary_mask
        if callable(self.gamma):
            mask = np.zeros(self.shape, dtype=bool)
            pts = self.points.reshape(self.shape + (self.dim,))
            mask[boundary] = np.asarray(self.gamma(pts[boundary]), dtype=bool)
            return mask
        sides = self._side_masks()
        mask = np.zeros(self.shape, dtype=bool)
        for name in self.gamma:
            mask |= sides[name]
        return mask

    def contains(self, x):
        """Strict interior test for points ``(..., d)``."""
        x = np.asarray(x, dtype=float)
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return np.all((x > lo) & (x < hi), axis=-1)


@dataclass
class GridField:
    domain: Domain
    values: np.ndarray
    name: str = "field"

    def at(self, x):
        """Multilinear interpolation at points ``(..., d)``."""
        interp = RegularGridInterpolator(self.domain.axes, self.values)
        return interp(np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, self.domain.dim))

    def rows(self):
        pts = self.domain.points
        return np.column_stack([pts, self.values.ravel()])


@dataclass
class DiscreteGenerator:
    domain: Domain
    matrix: sp.csr_matrix  # rows for interior nodes, columns for all nodes
    interior: np.ndarray   # flat indices of interior nodes
    boundary: np.ndarray
    upwinded: np.ndarray   # (interior, d) flags of axes switched to upwinding

    def interior_block(self):
        return self.matrix[:, self.interior]

    def boundary_block(self):
        return self.matrix[:, self.boundary]


def assemble_generator(model, domain):
    """Finite-difference generator on the interior nodes of ``domain``."""
    d = domain.dim
    if model.n != d:
        raise ValidationError(f"model dimension {model.n} does not match domain dimension {d}")
    shape = domain.shape
    strides = [int(np.prod(shape[i + 1 :])) for i in range(d)]
    flat_interior = np.flatnonzero(domain.interior_mask.ravel())
    flat_boundary = np.flatnonzero(domain.boundary_mask.ravel())
    pts = domain.points[flat_interior]
    b = model.drift(pts)
    s = model.diffusion(pts)
    D = s @ np.swapaxes(s, -1, -2)
    K = flat_interior.size
    rows, cols, vals = [], [], []
    diag = np.zeros(K)
    upwinded = np.zeros((K, d), dtype=bool)

    def add(offset, coef):
        rows.append(np.arange(K))
        cols.append(flat_interior + offset)
        vals.append(coef)

    # mixed term: monotone 7-point stencil along the diagonal matching the sign of c
    c = D[:, 0, 1] if d == 2 else np.zeros(K)
    if d == 2:
        hx, hy = domain.h
        if np.any(np.abs(c) > np.minimum(D[:, 0, 0] * hy / hx, D[:, 1, 1] * hx / hy) + 1e-14):
            raise ValidationError("sigma sigma^T is not diagonally dominant on the domain")
    for i in range(d):
        h = domain.h[i]
        # second-difference weight left on the axis after the mixed term borrows from it
        dii = np.maximum(D[:, i, i] - (np.abs(c) * h / domain.h[1 - i] if d == 2 else 0.0), 0.0)
        bi = b[:, i]
        diff = 0.5 * dii / h**2
        up = np.abs(bi) * h > dii
        upwinded[:, i] = up
        plus = np.where(up, diff + np.maximum(bi, 0.0) / h, diff + bi / (2 * h))
        minus = np.where(up, diff + np.maximum(-bi, 0.0) / h, diff - bi / (2 * h))
        add(strides[i], plus)
        add(-strides[i], minus)
        diag -= plus + minus
    if d == 2 and np.any(c != 0):
        w = np.abs(c) / (2 * domain.h[0] * domain.h[1])
        sx, sy = strides
        pos = c > 0
        add(sx + sy, np.where(pos, w, 0.0))
        add(-sx - sy, np.where(pos, w, 0.0))
        add(sx - sy, np.where(pos, 0.0, w))
        add(-sx + sy, np.where(pos, 0.0, w))
        diag -= 2 * w
    if np.any(diag == 0):
        bad = pts[diag == 0][0]
        raise SingularOperatorError(f"generator row vanishes at interior node {bad} (no drift, no diffusion)")
    add(0, diag)
    N = int(np.prod(shape))
    M = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(K, N)
    )
    M.sum_duplicates()
    return DiscreteGenerator(domain, M, flat_interior, flat_boundary, upwinded)


def _solve(gen, rhs_interior, boundary_values):
    A = gen.interior_block().tocsc()
    rhs = rhs_interior - gen.boundary_block() @ boundary_values
    with np.errstate(all="ignore"):
        if A.shape[0] <= DIRECT_LIMIT:
            try:
                u = spla.spsolve(A, rhs)
            except RuntimeError as exc:  # SuperLU reports exact singularity this way
                raise SingularOperatorError(str(exc)) from exc
        else:
            u, info = spla.bicgstab(A, rhs, rtol=ITER_TOL, atol=0.0, maxiter=20 * A.shape[0])
            if info != 0:
                raise SingularOperatorError(f"iterative solve did not converge (info={info})")
    if not np.all(np.isfinite(u)):
        raise SingularOperatorError("linear solve produced non-finite values (singular operator)")
    res = np.linalg.norm(A @ u - rhs) / max(1.0, np.linalg.norm(rhs))
    if res > 1e-8:
        raise SingularOperatorError(f"linear solve residual {res:.2e} too large")
    return u


def _assemble_field(domain, gen, u_interior, boundary_values, name):
    out = np.empty(int(np.prod(domain.shape)))
    out[gen.interior] = u_interior
    out[gen.boundary] = boundary_values
    return GridField(domain, out.reshape(domain.shape), name)


def escape_probability(model, domain):
    """Solve ``A p = 0`` with ``p = 1`` on gamma and ``p = 0`` on the rest of the boundary."""
    gmask = domain.gamma_mask.ravel()
    if not gmask.any():
        raise ValidationError("gamma contains no boundary nodes")
    gen = assemble_generator(model, domain)
    bvals = gmask[gen.boundary].astype(float)
    u = _solve(gen, np.zeros(gen.interior.size), bvals)
    return _assemble_field(domain, gen, u, bvals, "escape_probability")


def mean_residence_time(model, domain):
    """Solve ``A u = -1`` with ``u = 0`` on the whole boundary."""
    gen = assemble_generator(model, domain)
    bvals = np.zeros(gen.boundary.size)
    u = _solve(gen, -np.ones(gen.interior.size), bvals)
    return _assemble_field(domain, gen, u, bvals, "mean_residence_time")


def average_escape_probability(field):
    """Domain average of ``p`` by the trapezoidal rule on the grid."""
    integral = field.values
    for axis in reversed(field.domain.axes):
        integral = np.trapezoid(integral, axis, axis=-1)
    return float(integral) / field.domain.volume


# ---------------------------------------------------------------------------
# Monte Carlo first exit


@dataclass
class ExitStats:
    n_paths: int
    exit_times: np.ndarray  # inf where censored
    gamma_hits: np.ndarray
    censored: int
    dt: float
    bridge_correction: bool = False

    @property
    def exited(self):
        return np.isfinite(self.exit_times)

    @property
    def n_exited(self):
        return int(self.exited.sum())

    @property
    def mean_exit_time(self):
        return float(self.exit_times[self.exited].mean())

    @property
    def mean_exit_time_se(self):
        t = self.exit_times[self.exited]
        return float(t.std(ddof=1) / np.sqrt(t.size))

    @property
    def gamma_probability(self):
        return float(self.gamma_hits[self.exited].mean())

    @property
    def gamma_probability_se(self):
        p = self.gamma_probability
        return float(np.sqrt(p * (1 - p) / max(self.n_exited, 1)))

    def quantiles(self, qs=(0.1, 0.25, 0.5, 0.75, 0.9)):
        return {float(q): float(np.quantile(self.exit_times, q, method="inverted_cdf")) for q in qs}

    def to_record(self):
        return {
            "n_paths": self.n_paths,
            "dt": self.dt,
            "bridge_correction": self.bridge_correction,
            "censored": self.censored,
            "gamma_hits": int(self.gamma_hits.sum()),
            "gamma_probability": self.gamma_probability,
            "gamma_probability_se": self.gamma_probability_se,
            "mean_exit_time": self.mean_exit_time,
            "mean_exit_time_se": self.mean_exit_time_se,
            "quantiles": {f"{q:g}": v for q, v in self.quantiles().items()},
        }


def _nearest_gamma(domain, gmask, points):
    idx = []
    for axis, ((lo, _), h, n) in enumerate(zip(domain.bounds, domain.h, domain.shape)):
        idx.append(np.clip(np.rint((points[:, axis] - lo) / h).astype(int), 0, n - 1))
    return gmask[tuple(idx)]


def mc_exit(model, x0, domain, n_paths, dt, master_seed=42, bridge_correction=False, t_max=50.0,
            workers=1):
    """Euler-Maruyama first-exit simulation from ``x0``.

    Exit is detected at the first grid node outside the box.  The exit face is
    the one the last step's segment crosses first; its gamma label is read off
    the nearest boundary grid node, so corner ties go to gamma whenever either
    adjacent side is gamma.  With ``bridge_correction`` a per-step Brownian
    bridge crossing probability ``exp(-2 d0 d1 / (D_ii dt))`` is also tested
    against each face.  Paths run in fixed chunks, so results do not depend
    on ``workers``.
    """
    d = domain.dim
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (d,) or model.n != d:
        raise ValidationError("x0 and model must match the domain dimension")
    if not domain.contains(x0):
        raise ValidationError("x0 must lie strictly inside the domain")
    if n_paths < 1:
        raise ValidationError("n_paths must be >= 1")
    if not (dt > 0 and t_max > 0):
        raise ValidationError("dt and t_max must be positive")
    seeds = _rng.derive_seeds(master_seed, n_paths)
    max_steps = int(np.ceil(t_max / dt))
    gmask = domain.gamma_mask

    def work(lo):
        return _exit_chunk(model, x0, domain, gmask, seeds[lo : lo + CHUNK], dt, max_steps,
                           bridge_correction)

    starts = range(0, n_paths, CHUNK)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(lo) for lo in starts]
    exit_times = np.concatenate([p[0] for p in parts])
    hits = np.concatenate([p[1] for p in parts])
    censored = int(np.sum(~np.isfinite(exit_times)))
    if censored > MAX_CENSORED * n_paths:
        raise CensoringError(f"{censored} of {n_paths} paths did not exit before t_max={t_max}")
    return ExitStats(n_paths, exit_times, hits, censored, dt, bridge_correction)


def _exit_chunk(model, x0, domain, gmask, seeds, dt, max_steps, bridge_correction):
    d = domain.dim
    lo = np.array([b[0] for b in domain.bounds])
    hi = np.array([b[1] for b in domain.bounds])
    n_paths = len(seeds)
    seeds = np.array(seeds, dtype=np.uint64)
    x = np.tile(x0, (n_paths, 1))
    exit_times = np.full(n_paths, np.inf)
    hits = np.zeros(n_paths, dtype=bool)
    active = np.arange(n_paths)
    n_faces = 2 * d
    step = 0
    while active.size and step < max_steps:
        nb = min(BLOCK_STEPS, max_steps - step)
        act_seeds = [int(s) for s in seeds[active]]
        dW = increment_block(act_seeds, model.m, step, nb, dt)
        if bridge_correction:
            # face order per step: lo_0, hi_0, lo_1, hi_1
            U = np.stack([_rng.uniforms(s, _rng.BRIDGE, step * n_faces, nb * n_faces)
                          for s in act_seeds]).reshape(len(act_seeds), nb, n_faces)
        xa = x[active]
        alive = np.ones(active.size, dtype=bool)
        for k in range(nb):
            t = (step + k) * dt
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                break
            xs = xa[idx]
            s = model.diffusion(xs, t)
            xn = xs + model.drift(xs, t) * dt + np.einsum("pij,pj->pi", s, dW[idx, k])
            out = np.any((xn <= lo) | (xn >= hi), axis=1)
            if bridge_correction:
                var = np.einsum("pij,pij->pi", s, s) * dt
                with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                    p_lo = np.where(var > 0, np.exp(-2 * (xs - lo) * (xn - lo) / var), 0.0)
                    p_hi = np.where(var > 0, np.exp(-2 * (hi - xs) * (hi - xn) / var), 0.0)
                u = U[idx, k]
                cross = np.concatenate([u[:, 0::2] < p_lo, u[:, 1::2] < p_hi], axis=1) & ~out[:, None]
                bridged = np.any(cross, axis=1)
            else:
                bridged = np.zeros(idx.size, dtype=bool)
            done = out | bridged
            if done.any():
                rows = np.flatnonzero(done)
                crossing = np.empty((rows.size, d))
                for r_i, r in enumerate(rows):
                    if out[r]:
                        crossing[r_i] = _crossing_point(xs[r], xn[r], lo, hi)
                    else:
                        face = int(np.argmax(cross[r]))
                        axis = face % d
                        crossing[r_i] = xs[r]
                        crossing[r_i, axis] = lo[axis] if face < d else hi[axis]
                glob = active[idx[rows]]
                exit_times[glob] = t + dt
                hits[glob] = _nearest_gamma(domain, gmask, crossing)
                alive[idx[rows]] = False
            xa[idx] = xn
        x[active] = xa
        active = active[alive]
        step += nb
    return exit_times, hits


def _crossing_point(x, xn, lo, hi):
    """Point where the segment ``x -> xn`` first leaves the box."""
    delta = xn - x
    fracs = []
    with np.errstate(divide="ignore", invalid="ignore"):
        for axis in range(x.size):
            if xn[axis] <= lo[axis] and delta[axis] != 0:
                fracs.append((lo[axis] - x[axis]) / delta[axis])
            if xn[axis] >= hi[axis] and delta[axis] != 0:
                fracs.append((hi[axis] - x[axis]) / delta[axis])
    frac = min(fracs) if fracs else 1.0
    return np.clip(x + frac * delta, lo, hi)


@dataclass
class PredictabilityWindow:
    q: float
    time: float
    ci_low: float
    ci_high: float
    n_paths: int
    censored: int

    def to_record(self):
        return {"q": self.q, "time": self.time, "ci": [self.ci_low, self.ci_high],
                "n_paths": self.n_paths, "censored": self.censored}


def exit_time_quantile(times, q):
    return float(np.quantile(times, q, method="inverted_cdf"))


def predictability_window(model, x0, domain, q, n_paths, dt, master_seed=42, n_boot=1000,
                          confidence=0.95, bridge_correction=False, t_max=50.0, workers=1):
    """``q``-quantile of the first-exit time from the data domain, with a bootstrap CI."""
    if not 0 < q < 1:
        raise ValidationError("q must lie in (0, 1)")
    stats = mc_exit(model, x0, domain, n_paths, dt, master_seed, bridge_correction, t_max, workers)
    times = stats.exit_times
    if stats.censored > (1 - q) * n_paths:
        raise UndefinedQuantileError(
            f"{stats.censored} censored samples exceed the {1 - q:.3g} upper tail"
        )
    est = exit_time_quantile(times, q)
    rng = np.random.default_rng(master_seed)
    boots = np.quantile(
        times[rng.integers(0, times.size, size=(n_boot, times.size))], q,
        axis=1, method="inverted_cdf",
    )
    alpha = 1 - confidence
    lo, hi = np.quantile(boots, [alpha / 2, 1 - alpha / 2])
    return PredictabilityWindow(q, est, float(lo), float(hi), n_paths, stats.censored)
