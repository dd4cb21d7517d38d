"""SDE models ``dX = b(X, t) dt + sigma(X, t) dW`` and their generators.

Drift and diffusion callables are vectorized over leading axes: ``drift(x, t)``
maps ``(..., n) -> (..., n)`` and ``diffusion(x, t)`` maps ``(..., n) ->
(..., n, m)``.  Optional ``jacobians(x, t)`` returns ``(..., m, n, n)`` where
slice ``j`` is the Jacobian of diffusion column ``j``.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import CapabilityError, UnknownModelError, ValidationError

FD_REL_STEP = 1e-6
PROBE_TOL = 1e-5


@dataclass(frozen=True)
class SdeModel:
    n: int
    m: int
    drift_fn: Callable
    diffusion_fn: Callable
    jacobians_fn: Optional[Callable] = None
    label: str = "model"
    params: dict = field(default_factory=dict)
    # noise structure flags used by Milstein
    additive: bool = False
    diagonal: bool = False
    jacobians_from_fd: bool = False
    validate: bool = True

    def __post_init__(self):
        if self.validate and self.jacobians_fn is not None and not self.jacobians_from_fd:
            bad = jacobian_probe_error(self)
            if bad > PROBE_TOL:
                raise ValidationError(
                    f"{self.label}: supplied Jacobians disagree with finite differences "
                    f"(relative error {bad:.2e})"
                )

    def drift(self, x, t=0.0):
        return np.asarray(self.drift_fn(np.asarray(x, dtype=float), t), dtype=float)

    def diffusion(self, x, t=0.0):
        return np.asarray(self.diffusion_fn(np.asarray(x, dtype=float), t), dtype=float)

    @property
    def has_jacobians(self):
        return self.jacobians_fn is not None

    def jacobians(self, x, t=0.0):
        if self.jacobians_fn is None:
            raise CapabilityError(
                f"{self.label}: diffusion Jacobians are required; "
                "supply them or call with_fd_jacobians()"
            )
        return np.asarray(self.jacobians_fn(np.asarray(x, dtype=float), t), dtype=float)

    def with_fd_jacobians(self):
        """Copy of the model whose Jacobians come from central differences."""
        return replace(
            self,
            jacobians_fn=lambda x, t: fd_jacobians(self.diffusion_fn, x, t),
            jacobians_from_fd=True,
        )

    def with_drift(self, drift_fn, label=None):
        return replace(self, drift_fn=drift_fn, label=label or self.label, validate=False)


def fd_jacobians(diffusion_fn, x, t=0.0):
    """Central-difference Jacobians of every diffusion column, ``(..., m, n, n)``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    cols = []
    for k in range(n):
        h = FD_REL_STEP * (1.0 + np.abs(x[..., k]))
        xp, xm = x.copy(), x.copy()
        xp[..., k] += h
        xm[..., k] -= h
        d = (np.asarray(diffusion_fn(xp, t)) - np.asarray(diffusion_fn(xm, t)))
        cols.append(d / (2.0 * h)[..., None, None])
    # cols[k][..., i, j] = d sigma_ij / d x_k  ->  out[..., j, i, k]
    return np.moveaxis(np.stack(cols, axis=-1), -2, -3)


def _probe_points(n, count=8, seed=0):
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=(count, n))


def jacobian_probe_error(model, points=None):
    """Largest relative gap between supplied and finite-difference Jacobians."""
    pts = _probe_points(model.n) if points is None else np.atleast_2d(points)
    given = np.asarray(model.jacobians_fn(pts, 0.0), dtype=float)
    approx = fd_jacobians(model.diffusion_fn, pts, 0.0)
    scale = max(1.0, float(np.abs(approx).max()))
    return float(np.abs(given - approx).max() / scale)


@dataclass(frozen=True)
class ScalarObservable:
    """Scalar function ``g(t, x)`` with its derivatives, vectorized over ``x``."""

    g: Callable
    gradient: Callable
    hessian: Callable
    time_derivative: Optional[Callable] = None

    def g_t(self, t, x):
        if self.time_derivative is None:
            return np.zeros(np.shape(x)[:-1])
        return self.time_derivative(t, x)

    def probe_error(self, points, t=0.0, step=1e-5):
        """Relative mismatch of gradient/Hessian against central differences."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[-1]
        worst = 0.0
        for x in pts:
            grad = np.asarray(self.gradient(t, x))
            hess = np.asarray(self.hessian(t, x))
            fd_grad = np.empty(n)
            fd_hess = np.empty((n, n))
            for k in range(n):
                e = np.zeros(n)
                e[k] = step * (1.0 + abs(x[k]))
                fd_grad[k] = (self.g(t, x + e) - self.g(t, x - e)) / (2 * e[k])
                fd_hess[:, k] = (np.asarray(self.gradient(t, x + e)) - np.asarray(self.gradient(t, x - e))) / (2 * e[k])
            scale = max(1.0, np.abs(fd_grad).max(), np.abs(fd_hess).max())
            worst = max(worst, np.abs(grad - fd_grad).max() / scale, np.abs(hess - fd_hess).max() / scale)
        return float(worst)


def half_square_norm():
    """The observable ``g(x) = |x|^2 / 2``."""
    return ScalarObservable(
        g=lambda t, x: 0.5 * np.sum(np.square(x), axis=-1),
        gradient=lambda t, x: np.asarray(x, dtype=float),
        hessian=lambda t, x: np.broadcast_to(np.eye(np.shape(x)[-1]), np.shape(x) + np.shape(x)[-1:]),
    )


def _check_dims(model, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.n:
        raise ValidationError(f"state has dimension {x.shape[-1]}, model expects {model.n}")
    return x


def apply_generator(model, obs, x, t=0.0):
    """``(grad g)^T b + 1/2 Tr[sigma sigma^T D^2 g]`` at ``x`` (batched)."""
    x = _check_dims(model, x)
    grad = np.asarray(obs.gradient(t, x), dtype=float)
    hess = np.asarray(obs.hessian(t, x), dtype=float)
    if grad.shape[-1] != model.n or hess.shape[-2:] != (model.n, model.n):
        raise ValidationError("observable derivatives do not match model dimension")
    b = model.drift(x, t)
    s = model.diffusion(x, t)
    cov = s @ np.swapaxes(s, -1, -2)
    return np.sum(grad * b, axis=-1) + 0.5 * np.einsum("...ij,...ji->...", cov, hess)


def noise_induced_drift(model, x, t=0.0):
    """``sum_j [D sigma^j] sigma^j`` at ``x``, shape ``(..., n)``."""
    jac = model.jacobians(x, t)
    s = model.diffusion(x, t)
    return np.einsum("...jik,...kj->...i", jac, s)


def ito_to_stratonovich_drift(model, x, t=0.0):
    """``mu(x) = b(x) - 1/2 sum_j [D sigma^j(x)] sigma^j(x)``."""
    x = _check_dims(model, x)
    return model.drift(x, t) - 0.5 * noise_induced_drift(model, x, t)


def stratonovich_to_ito(model):
    """Ito model equivalent to the Stratonovich SDE with the same coefficients."""
    model.jacobians(np.zeros(model.n))

    def drift(x, t):
        return model.drift(x, t) + 0.5 * noise_induced_drift(model, x, t)

    return model.with_drift(drift, label=f"ito({model.label})")


def ito_to_stratonovich(model):
    """Stratonovich-form coefficients of an Ito model (drift ``mu``, same sigma)."""
    model.jacobians(np.zeros(model.n))
    return model.with_drift(
        lambda x, t: ito_to_stratonovich_drift(model, x, t), label=f"strat({model.label})"
    )


# ---------------------------------------------------------------------------
# builtin catalog


def _as_time_fn(c):
    return c if callable(c) else (lambda t, c=c: c)


def _const_diffusion(mat):
    mat = np.asarray(mat, dtype=float)

    def fn(x, t):
        return np.broadcast_to(mat, np.shape(x)[:-1] + mat.shape)

    return fn


def _zero_jacobians(n, m):
    return lambda x, t: np.zeros(np.shape(x)[:-1] + (m, n, n))


def langevin(b=1.0, a=1.0):
    """Ornstein-Uhlenbeck / Langevin: ``dX = -b X dt + a dW``."""
    return SdeModel(
        n=1, m=1,
        drift_fn=lambda x, t: -b * x,
        diffusion_fn=_const_diffusion([[a]]),
        jacobians_fn=_zero_jacobians(1, 1),
        label="langevin", params={"b": b, "a": a}, additive=True,
    )


def population(r=1.0, alpha=0.5):
    """Geometric Brownian motion: ``dX = r X dt + alpha X dW``."""
    return SdeModel(
        n=1, m=1,
        drift_fn=lambda x, t: r * x,
        diffusion_fn=lambda x, t: alpha * np.asarray(x)[..., None],
        jacobians_fn=lambda x, t: np.full(np.shape(x)[:-1] + (1, 1, 1), float(alpha)),
        label="population", params={"r": r, "alpha": alpha},
    )


def linear_scalar(a1=0.0, a2=0.0, b1=0.0, b2=1.0):
    """``dX = [a1(t) X + a2(t)] dt + [b1(t) X + b2(t)] dW``; coefficients constant or callables of t."""
    a1f, a2f, b1f, b2f = map(_as_time_fn, (a1, a2, b1, b2))
    return SdeModel(
        n=1, m=1,
        drift_fn=lambda x, t: a1f(t) * x + a2f(t),
        diffusion_fn=lambda x, t: (b1f(t) * np.asarray(x) + b2f(t))[..., None],
        jacobians_fn=lambda x, t: np.full(np.shape(x)[:-1] + (1, 1, 1), float(b1f(t))),
        label="linear_scalar", params={"a1": a1, "a2": a2, "b1": b1, "b2": b2},
        validate=not any(callable(c) for c in (a1, a2, b1, b2)),
    )


def linear_system(A, f=None, g=None):
    """``dX = [A X + f(t)] dt + sum_k g_k(t) dW_k`` with constant ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    f = np.zeros(n) if f is None else f
    g = [np.eye(n)[0]] if g is None else list(g)
    ff = _as_time_fn(f)
    gfs = [_as_time_fn(gk) for gk in g]

    def diffusion(x, t):
        cols = np.stack([np.asarray(gk(t), dtype=float) for gk in gfs], axis=-1)
        return np.broadcast_to(cols, np.shape(x)[:-1] + cols.shape)

    return SdeModel(
        n=n, m=len(gfs),
        drift_fn=lambda x, t: x @ A.T + np.asarray(ff(t), dtype=float),
        diffusion_fn=diffusion,
        jacobians_fn=_zero_jacobians(n, len(gfs)),
        label="linear_system", params={"A": A, "f": f, "g": g}, additive=True,
        validate=False,
    )


def oscillator(a=0.0, b=1.0, sigma=1.0):
    """``x'' + a x' + b x = sigma W'`` as a first-order system in ``(x, y)``."""
    A = np.array([[0.0, 1.0], [-b, -a]])
    model = linear_system(A, g=[np.array([0.0, sigma])])
    return replace(model, label="oscillator", params={"a": a, "b": b, "sigma": sigma})


def harmonic(k=1.0, h=1.0):
    """Stochastic harmonic oscillator ``x'' + k x = h W'``."""
    model = oscillator(a=0.0, b=k, sigma=h)
    return replace(model, label="harmonic", params={"k": k, "h": h})


def lorenz(r=28.0, s=10.0, b=8.0 / 3.0, eps=0.01):
    """Lorenz system with diagonal multiplicative noise ``sqrt(eps) * diag(x, y, z)``."""
    root = np.sqrt(eps)

    def drift(x, t):
        X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
        return np.stack([s * (Y - X), r * X - Y - X * Z, X * Y - b * Z], axis=-1)

    def diffusion(x, t):
        x = np.asarray(x, dtype=float)
        return root * (x[..., :, None] * np.eye(3))

    def jacobians(x, t):
        unit = np.zeros((3, 3, 3))
        for j in range(3):
            unit[j, j, j] = 1.0
        return np.broadcast_to(root * unit, np.shape(x)[:-1] + unit.shape)

    return SdeModel(
        n=3, m=3, drift_fn=drift, diffusion_fn=diffusion, jacobians_fn=jacobians,
        label="lorenz", params={"r": r, "s": s, "b": b, "eps": eps}, diagonal=True,
    )


def circle_manifold():
    """``b = (-x/2, -y/2)``, ``sigma = (-y, x)^T``: every centred circle is invariant."""
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    return SdeModel(
        n=2, m=1,
        drift_fn=lambda x, t: -0.5 * np.asarray(x),
        diffusion_fn=lambda x, t: (np.asarray(x) @ rot.T)[..., None],
        jacobians_fn=lambda x, t: np.broadcast_to(rot, np.shape(x)[:-1] + (1, 2, 2)),
        label="circle_manifold",
    )


BUILTIN_MODELS = {
    "circle_manifold": circle_manifold,
    "harmonic": harmonic,
    "langevin": langevin,
    "linear_scalar": linear_scalar,
    "linear_system": linear_system,
    "lorenz": lorenz,
    "oscillator": oscillator,
    "population": population,
}


def builtin_models():
    """Name -> factory mapping of the builtin catalog."""
    return dict(BUILTIN_MODELS)


def get_model(name, **params):
    try:
        factory = BUILTIN_MODELS[name]
    except KeyError:
        raise UnknownModelError(
            f"unknown model {name!r}; known: {', '.join(sorted(BUILTIN_MODELS))}"
        ) from None
    if name == "linear_system" and "A" not in params:
        params["A"] = np.zeros((1, 1))
    return factory(**params)
