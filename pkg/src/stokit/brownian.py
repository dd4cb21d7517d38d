"""Two-sided Brownian sample paths on uniform grids.

A path stores an unanchored array ``base`` of cumulative sums together with the
index of the node that plays the role of ``t = 0``.  The public ``values`` are
``base - base[origin]``, so a Wiener shift only moves the origin index and
composing shifts is exact to the last bit.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import _rng
from .errors import GridRangeError, ValidationError

_ALIGN_TOL = 1e-9


def grid_steps(t, dt):
    """Number of ``dt`` steps in ``t``; raise if ``t`` is not a grid multiple."""
    k = t / dt
    j = int(round(k))
    if abs(k - j) > _ALIGN_TOL * max(1.0, abs(k)):
        raise GridRangeError(f"t={t!r} is not a multiple of dt={dt!r}")
    return j


@dataclass(frozen=True, eq=False)
class BrownianPath:
    seed: int
    dt: float
    base: np.ndarray
    origin: int
    level: int = 0

    def __post_init__(self):
        if self.base.ndim != 2:
            raise ValidationError("base must have shape (nodes, m)")
        if not 0 <= self.origin < self.base.shape[0]:
            raise ValidationError("origin index outside the stored window")
        self.base.setflags(write=False)

    @classmethod
    def from_values(cls, values, dt, t_min=0.0, seed=0):
        """Wrap arbitrary node values (used for injected test paths)."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        origin = grid_steps(-t_min, dt)
        if not 0 <= origin < values.shape[0]:
            raise ValidationError("t_min must satisfy t_min <= 0 <= t_max")
        base = values - values[origin]
        return cls(seed=seed, dt=float(dt), base=base, origin=origin)

    @property
    def m(self):
        return self.base.shape[1]

    @property
    def n_nodes(self):
        return self.base.shape[0]

    @property
    def t_min(self):
        return -self.origin * self.dt

    @property
    def t_max(self):
        return (self.n_nodes - 1 - self.origin) * self.dt

    @cached_property
    def times(self):
        t = (np.arange(self.n_nodes) - self.origin) * self.dt
        t.setflags(write=False)
        return t

    @cached_property
    def values(self):
        v = self.base - self.base[self.origin]
        v.setflags(write=False)
        return v

    def index(self, t):
        """Array index of grid time ``t``."""
        j = self.origin + grid_steps(t, self.dt)
        if not 0 <= j < self.n_nodes:
            raise GridRangeError(
                f"t={t!r} outside window [{self.t_min:g}, {self.t_max:g}]"
            )
        return j

    def value(self, t):
        return self.values[self.index(t)]

    def increments(self, a, b):
        """Increments ``W(t_{j+1}) - W(t_j)`` for the cells covering ``[a, b]``."""
        i, j = self.index(a), self.index(b)
        if j < i:
            raise GridRangeError("interval end precedes its start")
        return np.diff(self.values[i : j + 1], axis=0)

    def coarsen(self, factor):
        """Subsample every ``factor``-th node; values at kept nodes are unchanged."""
        factor = int(factor)
        if factor < 1:
            raise ValidationError("factor must be >= 1")
        if self.origin % factor:
            raise GridRangeError("origin is not on the coarse grid")
        return BrownianPath(
            seed=self.seed,
            dt=self.dt * factor,
            base=self.base[::factor].copy(),
            origin=self.origin // factor,
            level=self.level,
        )


def _half(seed, stream, m, n_steps, dt):
    z = _rng.normals(seed, stream, 0, n_steps * m).reshape(n_steps, m)
    out = np.zeros((n_steps + 1, m))
    np.cumsum(z * np.sqrt(dt), axis=0, out=out[1:])
    return out


def sample_path(seed, m, t_min, t_max, dt):
    """Two-sided Brownian path on ``[t_min, t_max]`` with ``W(0) = 0``.

    The positive and negative halves come from independent keyed streams, so
    ``W(-t)`` for ``t > 0`` is an independent Brownian motion run backwards.
    """
    if not dt > 0:
        raise ValidationError("dt must be positive")
    if m < 1:
        raise ValidationError("noise dimension m must be >= 1")
    if not t_min <= 0 <= t_max:
        raise ValidationError("bounds must satisfy t_min <= 0 <= t_max")
    n_neg = grid_steps(-t_min, dt)
    n_pos = grid_steps(t_max, dt)
    pos = _half(seed, _rng.POSITIVE, m, n_pos, dt)
    neg = _half(seed, _rng.NEGATIVE, m, n_neg, dt)
    base = np.concatenate([neg[:0:-1], pos])
    return BrownianPath(seed=int(seed), dt=float(dt), base=base, origin=n_neg)


def sample_block(seeds, m, n_steps, dt):
    """Positive halves of many paths stacked as ``(paths, n_steps + 1, m)``.

    Row ``i`` equals ``sample_path(seeds[i], m, 0, n_steps * dt, dt).values``
    bit for bit.
    """
    out = np.empty((len(seeds), n_steps + 1, m))
    for i, s in enumerate(seeds):
        out[i] = _half(s, _rng.POSITIVE, m, n_steps, dt)
    return out


def increment_block(seeds, m, start_step, n_steps, dt):
    """Raw positive-half increments of steps ``start_step .. start_step + n_steps``.

    Returns ``(paths, n_steps, m)``; used where paths are generated lazily.
    """
    out = np.empty((len(seeds), n_steps, m))
    for i, s in enumerate(seeds):
        z = _rng.normals(s, _rng.POSITIVE, start_step * m, n_steps * m)
        out[i] = z.reshape(n_steps, m)
    return out * np.sqrt(dt)


def wiener_shift(path, s):
    """Return ``theta_s omega`` with ``(theta_s omega)(t) = omega(t + s) - omega(s)``."""
    return BrownianPath(
        seed=path.seed, dt=path.dt, base=path.base, origin=path.index(s), level=path.level
    )


def refine(path, factor):
    """Refine to step ``dt / factor`` by Brownian-bridge sampling inside each cell.

    Original nodes are copied exactly.  Interior draws are keyed by
    ``(seed, refinement level, cell index, sub-step)``.
    """
    factor = int(factor)
    if factor < 2:
        raise ValidationError("refinement factor must be >= 2")
    cells, m = path.n_nodes - 1, path.m
    h = path.dt / factor
    stream = _rng.refine_stream(path.level, factor)
    z = _rng.normals(path.seed, stream, 0, cells * (factor - 1) * m)
    z = z.reshape(cells, factor - 1, m)
    left, right = path.base[:-1], path.base[1:]
    fine = np.empty((cells, factor, m))
    fine[:, 0] = left
    prev = left
    for k in range(1, factor):
        remaining = factor - k + 1
        prev = prev + (right - prev) / remaining + np.sqrt(h * (remaining - 1) / remaining) * z[:, k - 1]
        fine[:, k] = prev
    base = np.concatenate([fine.reshape(cells * factor, m), path.base[-1:]])
    return BrownianPath(
        seed=path.seed, dt=h, base=base, origin=path.origin * factor, level=path.level + 1
    )


def holder_exponent_estimate(path):
    """Log-log slope of the largest increment magnitude against lag.

    Diagnostic only: for Brownian paths the slope sits a little under 1/2.
    No Holder constant is estimated.
    """
    if path.n_nodes < 100:
        raise ValidationError("need at least 100 nodes")
    w = path.values
    lags = np.unique(np.geomspace(1, path.n_nodes // 4, 12).astype(int))
    peaks = np.array(
        [np.linalg.norm(w[lag:] - w[:-lag], axis=1).max() for lag in lags]
    )
    if np.any(peaks <= 0):
        raise ValidationError("degenerate path: zero increments at some lag")
    slope, _ = np.polyfit(np.log(lags * path.dt), np.log(peaks), 1)
    return float(slope)
