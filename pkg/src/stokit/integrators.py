"""Time-stepping schemes driven by pre-generated Brownian paths.

Schemes never draw noise themselves; they consume node values of a path (or a
stacked block of paths), which lets closed-form oracles, cocycle checks and
refinement studies share exactly the same realization.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _rng
from .brownian import grid_steps, sample_block
from .errors import BlowUpError, CapabilityError, EnsembleFailure, ValidationError
from .stats import RunningMoments

BLOWUP_LIMIT = 1e12
MAX_BLOWUP_FRACTION = 0.01
CHUNK = 1000


@dataclass
class Trajectory:
    label: str
    times: np.ndarray
    states: np.ndarray
    seed: int = 0

    @property
    def terminal(self):
        return self.states[-1]


def check_milstein(model):
    if model.m == 1 or model.diagonal or model.additive:
        return
    raise CapabilityError(
        f"{model.label}: Milstein needs single-column, diagonal or additive noise "
        "(multi-column Levy areas are not simulated)"
    )


def integrate_block(model, x0, W, t0, dt, scheme="em"):
    """Advance a batch of states along stacked path values.

    ``W`` has shape ``(paths, nodes, m)`` holding node values; ``x0`` is ``(n,)`` or
    ``(paths, n)``.  Returns ``(states, blowup_times)`` where blown-up paths are
    NaN from the offending node on and ``blowup_times`` is NaN for healthy paths.
    """
    P, N, m = W.shape
    if m != model.m:
        raise ValidationError(f"path has {m} noise columns, model needs {model.m}")
    x = np.broadcast_to(np.asarray(x0, dtype=float), (P, model.n)).copy()
    if scheme == "milstein":
        check_milstein(model)
        corrected = not model.additive
    elif scheme == "em":
        corrected = False
    else:
        raise ValidationError(f"unknown scheme {scheme!r}")
    dW = np.diff(W, axis=1)
    states = np.empty((P, N, model.n))
    states[:, 0] = x
    blown = np.full(P, np.nan)
    alive = np.ones(P, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N - 1):
            t = t0 + k * dt
            dw = dW[:, k]
            s = model.diffusion(x, t)
            new = x + model.drift(x, t) * dt + np.einsum("pij,pj->pi", s, dw)
            if corrected:
                jac = model.jacobians(x, t)
                lead = np.einsum("pjik,pkj->pji", jac, s)
                new = new + 0.5 * np.einsum("pji,pj->pi", lead, dw * dw - dt)
            bad = alive & ~(np.all(np.abs(new) <= BLOWUP_LIMIT, axis=1))
            if bad.any():
                blown[bad] = t + dt
                alive &= ~bad
                new[bad] = np.nan
            x = new
            states[:, k + 1] = x
    return states, blown


def _single(model, x0, path, t0, T, scheme):
    i0, i1 = path.index(t0), path.index(T)
    if i1 <= i0:
        raise ValidationError("need T > t0")
    W = path.values[None, i0 : i1 + 1]
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    states, blown = integrate_block(model, x0, W, t0, path.dt, scheme)
    if not np.isnan(blown[0]):
        raise BlowUpError(blown[0])
    return Trajectory(model.label, path.times[i0 : i1 + 1].copy(), states[0], path.seed)


def euler_maruyama(model, x0, path, t0, T):
    """``X_{k+1} = X_k + b dt + sigma dW_k`` on the grid of ``path``."""
    return _single(model, x0, path, t0, T, "em")


def milstein(model, x0, path, t0, T):
    """Euler-Maruyama plus ``1/2 (D sigma^j sigma^j)((dW_j)^2 - dt)`` per column."""
    return _single(model, x0, path, t0, T, "milstein")


SCHEMES = {"em": euler_maruyama, "milstein": milstein}


def rk4(f, y0, t0, T, dt):
    """Classical RK4 for ``y' = f(y, t)``; returns (times, states)."""
    n = grid_steps(T - t0, dt)
    ys = np.empty((n + 1,) + np.shape(y0))
    y = np.asarray(y0, dtype=float)
    ys[0] = y
    for k in range(n):
        t = t0 + k * dt
        k1 = f(y, t)
        k2 = f(y + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = f(y + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = f(y + dt * k3, t + dt)
        y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        ys[k + 1] = y
    return t0 + dt * np.arange(n + 1), ys


def deterministic_reference(model, x0, t0, T, dt, substeps=10):
    """Noise-free solution ``dY = b(Y) dt`` by RK4 at ``dt / substeps``, sampled every ``dt``."""
    _, ys = rk4(model.drift, np.asarray(x0, dtype=float), t0, T, dt / substeps)
    return ys[::substeps]


def gaussian_initial_states(master_seed, n_paths, mean, cov):
    """Keyed Gaussian initial states, row ``i`` depending only on ``(seed, i)``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    chol = np.linalg.cholesky(np.atleast_2d(np.asarray(cov, dtype=float)))
    n = mean.size
    z = np.stack([_rng.normals(s, _rng.INITIAL, 0, n) for s in _rng.derive_seeds(master_seed, n_paths)])
    return mean + z @ chol.T


@dataclass
class Ensemble:
    label: str
    scheme: str
    master_seed: int
    n_paths: int
    dt: float
    times: np.ndarray
    stats: dict
    blowups: int = 0
    reference: np.ndarray = None
    states: np.ndarray = field(default=None, repr=False)

    @property
    def n_used(self):
        return self.n_paths - self.blowups

    def mean(self, name):
        return self.stats[name].mean

    def se(self, name):
        return self.stats[name].std_error()

    def variance(self, name="state"):
        return self.stats[name].variance()

    def variance_se(self, name="state"):
        return self.stats[name].variance_std_error()


def per_path_quantities(model, times, X, reference=None, extra=None):
    """Per-path, per-node quantities reduced by the ensemble runner."""
    P, N, n = X.shape
    dt = times[1] - times[0] if N > 1 else 1.0
    b = np.empty_like(X)
    half_tr = np.empty((P, N))
    for k, t in enumerate(times):
        b[:, k] = model.drift(X[:, k], t)
        s = model.diffusion(X[:, k], t)
        half_tr[:, k] = 0.5 * np.sum(s * s, axis=(-2, -1))
    energy = 0.5 * np.sum(X * X, axis=-1)
    drift_term = np.sum(X * b, axis=-1)
    q = {
        "state": X,
        "energy": energy,
        "drift_term": drift_term,
        "noise_term": half_tr,
    }
    if N >= 2:
        q["energy_residual"] = np.gradient(energy, dt, axis=1) - drift_term - half_tr
    if reference is not None:
        U = X - reference[None]
        bY = np.stack([model.drift(reference[k], t) for k, t in enumerate(times)])
        half_mse = 0.5 * np.sum(U * U, axis=-1)
        err_drift = np.sum(U * (b - bY[None]), axis=-1)
        q["half_mse"] = half_mse
        q["error_drift_term"] = err_drift
        if N >= 2:
            q["error_residual"] = np.gradient(half_mse, dt, axis=1) - err_drift - half_tr
    for name, fn in (extra or {}).items():
        q[name] = fn(times, X, reference)
    return q


def run_ensemble(model, x0, scheme, n_paths, t0, T, dt, master_seed=42, reference=None,
                 extra=None, workers=1, keep_states=False):
    """Simulate ``n_paths`` keyed paths and reduce per-node moments.

    ``x0`` is a state ``(n,)`` or one state per path ``(n_paths, n)``.  Paths are
    processed in fixed chunks of ``CHUNK`` and merged in chunk order, so the
    result is bit-identical for every ``workers`` value.  Paths that blow up are
    excluded from the moments; more than 1% of them fails the run.
    """
    if n_paths < 1:
        raise ValidationError("n_paths must be >= 1")
    if scheme not in SCHEMES:
        raise ValidationError(f"unknown scheme {scheme!r}")
    if t0 < 0:
        raise ValidationError("t0 must be >= 0")
    i0, i1 = grid_steps(t0, dt), grid_steps(T, dt)
    if i1 <= i0:
        raise ValidationError("need T > t0")
    if scheme == "milstein":
        check_milstein(model)
    x0 = np.asarray(x0, dtype=float)
    per_path_x0 = x0.ndim == 2
    if per_path_x0 and x0.shape[0] != n_paths:
        raise ValidationError("per-path initial states must have n_paths rows")
    seeds = _rng.derive_seeds(master_seed, n_paths)
    times = t0 + dt * np.arange(i1 - i0 + 1)
    if reference is not None:
        reference = np.asarray(reference, dtype=float)
        if reference.shape != (times.size, model.n):
            raise ValidationError("reference must have one state per output node")

    def work(lo):
        hi = min(lo + CHUNK, n_paths)
        W = sample_block(seeds[lo:hi], model.m, i1, dt)[:, i0:]
        start = x0[lo:hi] if per_path_x0 else x0
        X, blown = integrate_block(model, start, W, t0, dt, scheme)
        ok = np.isnan(blown)
        q = per_path_quantities(model, times, X[ok], reference, extra)
        return (
            {k: RunningMoments.from_samples(v) for k, v in q.items()},
            int((~ok).sum()),
            X if keep_states else None,
        )

    starts = range(0, n_paths, CHUNK)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, starts))
    else:
        results = [work(lo) for lo in starts]

    stats, blowups = {}, 0
    for chunk_stats, nblown, _ in results:
        blowups += nblown
        for k, v in chunk_stats.items():
            stats.setdefault(k, RunningMoments(v.mean.shape)).merge(v)
    if blowups > MAX_BLOWUP_FRACTION * n_paths:
        raise EnsembleFailure(f"{blowups} of {n_paths} paths blew up")
    states = np.concatenate([r[2] for r in results]) if keep_states else None
    return Ensemble(model.label, scheme, master_seed, n_paths, dt, times, stats,
                    blowups, reference, states)


def strong_errors(model, x0, exact, scheme, dt_list, n_paths, T=1.0, master_seed=42):
    """RMS terminal error of ``scheme`` against ``exact`` for each step in ``dt_list``.

    All step sizes subsample one fine path per realization, so every level and
    the oracle see the same Brownian nodes.  ``exact(times, W)`` maps node
    values ``(paths, nodes, m)`` to states ``(paths, nodes, n)``.
    """
    dts = np.asarray(sorted(dt_list))
    fine = dts[0]
    factors = [grid_steps(d, fine) for d in dts]
    n_fine = grid_steps(T, fine)
    seeds = _rng.derive_seeds(master_seed, n_paths)
    sq = np.zeros(len(dts))
    for lo in range(0, n_paths, CHUNK):
        Wf = sample_block(seeds[lo : lo + CHUNK], model.m, n_fine, fine)
        for i, f in enumerate(factors):
            W = Wf[:, ::f]
            times = f * fine * np.arange(W.shape[1])
            X, blown = integrate_block(model, x0, W, 0.0, f * fine, scheme)
            if not np.all(np.isnan(blown)):
                raise EnsembleFailure("blow-up during strong-order study")
            ref = exact(times, W)[:, -1]
            sq[i] += np.sum((X[:, -1] - ref) ** 2)
    return dts, np.sqrt(sq / n_paths)


def strong_order_estimate(model, x0, exact, scheme, dt_list, n_paths, T=1.0, master_seed=42):
    """Least-squares slope of log RMS terminal error against log dt."""
    if len(dt_list) < 3:
        raise ValidationError("need at least 3 step sizes")
    dts, rms = strong_errors(model, x0, exact, scheme, dt_list, n_paths, T, master_seed)
    slope, _ = np.polyfit(np.log(dts), np.log(rms), 1)
    return float(slope)
