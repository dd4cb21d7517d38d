"""Mean-energy and error-growth diagnostics over simulated ensembles.

Time derivatives of empirical moments use centred differences with one-sided
ends (``numpy.gradient``) for the balance residuals and a backward difference
for the Lorenz inequalities.  Residuals are reduced per path, so their standard
errors are the paired Monte Carlo errors.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .integrators import deterministic_reference, run_ensemble
from .models import lorenz
from .stats import Z3

MIN_BOUND_PATHS = 1000


@dataclass
class MomentSeries:
    times: np.ndarray
    energy: np.ndarray
    drift_term: np.ndarray
    noise_term: np.ndarray
    residual: np.ndarray
    se: np.ndarray
    energy_se: np.ndarray

    def within(self, z=Z3):
        """Boolean mask of nodes whose residual is within ``z`` standard errors of 0."""
        return np.abs(self.residual) <= z * self.se

    def rows(self):
        return zip(self.times, self.energy, self.drift_term, self.noise_term, self.residual, self.se)


@dataclass
class ErrorSeries:
    times: np.ndarray
    half_mse: np.ndarray
    half_mse_se: np.ndarray
    drift_term: np.ndarray
    noise_term: np.ndarray
    residual: np.ndarray
    residual_se: np.ndarray
    reference: np.ndarray
    reference_label: str = "rk4"

    def within(self, z=Z3):
        return np.abs(self.residual) <= z * self.residual_se


@dataclass
class BoundReport:
    """Node-wise check of ``d/dt E q <= c(t) E q`` with a paired Monte Carlo gap."""

    check: str
    times: np.ndarray
    coefficient: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    gap: np.ndarray
    se: np.ndarray

    @property
    def violations(self):
        return int(np.sum(self.gap > Z3 * self.se))

    @property
    def passed(self):
        return self.violations == 0

    def summary(self):
        coef = self.coefficient
        return {
            "check": self.check,
            "coefficient": float(coef) if np.ndim(coef) == 0 else [float(c) for c in coef],
            "violations": self.violations,
            "nodes": int(self.lhs.size),
            "pass": self.passed,
        }


def energy_balance_residual(model, ensemble):
    """Residual of ``d/dt 1/2 E|X|^2 = E(X . b) + 1/2 E Tr(sigma sigma^T)`` per node."""
    if ensemble.times.size < 3:
        raise ValidationError("need at least 3 time nodes")
    if ensemble.label != model.label:
        raise ValidationError("ensemble was produced by a different model")
    st = ensemble.stats
    return MomentSeries(
        times=ensemble.times,
        energy=st["energy"].mean,
        drift_term=st["drift_term"].mean,
        noise_term=st["noise_term"].mean,
        residual=st["energy_residual"].mean,
        se=st["energy_residual"].std_error(),
        energy_se=st["energy"].std_error(),
    )


def error_growth_series(model, x0, n_paths, T, dt, master_seed=42, scheme="em",
                        reference=None, workers=1):
    """Error ``U = X - Y`` against the noise-free solution ``Y`` from the same start.

    ``reference`` (one state per node) defaults to RK4 at ``dt / 10``.
    """
    x0 = np.asarray(x0, dtype=float)
    if reference is None:
        reference = deterministic_reference(model, x0, 0.0, T, dt)
    reference = np.asarray(reference, dtype=float)
    if not np.allclose(reference[0], x0, rtol=0, atol=1e-12):
        raise ValidationError("reference does not start from the ensemble's initial state")
    ens = run_ensemble(model, x0, scheme, n_paths, 0.0, T, dt, master_seed,
                       reference=reference, workers=workers)
    if ens.times.size < 3:
        raise ValidationError("need at least 3 time nodes")
    st = ens.stats
    return ErrorSeries(
        times=ens.times,
        half_mse=st["half_mse"].mean,
        half_mse_se=st["half_mse"].std_error(),
        drift_term=st["error_drift_term"].mean,
        noise_term=st["noise_term"].mean,
        residual=st["error_residual"].mean,
        residual_se=st["error_residual"].std_error(),
        reference=reference,
    )


def lorenz_energy_coefficient(r, s, b, eps):
    return 2.0 * (-min(s, 1.0, b) + 0.5 * (r + s + eps))


def lorenz_error_coefficients(r, s, b, eps, reference):
    """Node-wise growth coefficients ``2[-min(s,1,b) + (r + s + |y| + |z| + eps)/2]``."""
    ref = np.asarray(reference, dtype=float)
    return 2.0 * (-min(s, 1.0, b) + 0.5 * (r + s + np.abs(ref[:, 1]) + np.abs(ref[:, 2]) + eps))


def _left_rate_gap(values, coef, dt):
    # backward difference at node k compared with coef_k * value_k, nodes 1..N-1
    rate = (values[:, 1:] - values[:, :-1]) / dt
    gap = rate - coef * values[:, 1:]
    return np.concatenate([np.zeros((values.shape[0], 1)), gap], axis=1)


def _bound_report(name, ens, coef):
    st = ens.stats
    gap = st["gap"].mean
    rhs = np.broadcast_to(coef, ens.times.shape) * st["sq"].mean
    lhs = gap + rhs
    lhs[0] = 0.0  # no left difference at the first node
    return BoundReport(name, ens.times, coef, lhs, rhs, gap, st["gap"].std_error())


def lorenz_energy_bound_check(r=28.0, s=10.0, b=8.0 / 3.0, eps=0.01, n_paths=10_000, T=1.0,
                              dt=1e-3, x0=(1.0, 1.0, 1.0), master_seed=42, workers=1):
    """``d/dt E|X|^2 <= 2[-min(s,1,b) + (r+s+eps)/2] E|X|^2`` at every node within 3 SE."""
    if n_paths < MIN_BOUND_PATHS:
        raise ValidationError(f"need at least {MIN_BOUND_PATHS} paths")
    model = lorenz(r, s, b, eps)
    coef = lorenz_energy_coefficient(r, s, b, eps)

    def gap(times, X, ref):
        return _left_rate_gap(np.sum(X * X, axis=-1), coef, dt)

    def sq(times, X, ref):
        return np.sum(X * X, axis=-1)

    ens = run_ensemble(model, np.asarray(x0, dtype=float), "em", n_paths, 0.0, T, dt,
                       master_seed, extra={"gap": gap, "sq": sq}, workers=workers)
    return _bound_report("lorenz_energy_bound", ens, coef)


def lorenz_error_bound_check(r=28.0, s=10.0, b=8.0 / 3.0, eps=0.01, n_paths=10_000, T=1.0,
                             dt=1e-3, x0=(1.0, 1.0, 1.0), master_seed=42, reference=None,
                             workers=1):
    """Error-growth inequality around the noise-free Lorenz trajectory, node-wise.

    The true noise contribution is ``eps/2 E|X|^2`` rather than ``eps/2 E|U|^2``, so
    from ``U_0 = 0`` the inequality is violated over a short initial transient.
    """
    if n_paths < MIN_BOUND_PATHS:
        raise ValidationError(f"need at least {MIN_BOUND_PATHS} paths")
    model = lorenz(r, s, b, eps)
    x0 = np.asarray(x0, dtype=float)
    if reference is None:
        reference = deterministic_reference(lorenz(r, s, b, 0.0), x0, 0.0, T, dt)
    reference = np.asarray(reference, dtype=float)
    if not np.allclose(reference[0], x0, rtol=0, atol=1e-12):
        raise ValidationError("reference does not start from the ensemble's initial state")
    coef = lorenz_error_coefficients(r, s, b, eps, reference)

    def gap(times, X, ref):
        return _left_rate_gap(np.sum((X - ref) ** 2, axis=-1), coef[1:], dt)

    def sq(times, X, ref):
        return np.sum((X - ref) ** 2, axis=-1)

    ens = run_ensemble(model, x0, "em", n_paths, 0.0, T, dt, master_seed,
                       reference=reference, extra={"gap": gap, "sq": sq}, workers=workers)
    return _bound_report("lorenz_error_bound", ens, coef)
