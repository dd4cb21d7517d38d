import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stokit import _rng
from stokit.brownian import BrownianPath, sample_path, wiener_shift
from stokit.errors import GridRangeError, ValidationError
from stokit.models import langevin, linear_scalar, lorenz
from stokit.rds import (closed_form_solver, cocycle_check, cocycle_order, default_truncation,
                        ou_stationary_orbit, pathwise_linear_solver, rk4_solver, scheme_solver,
                        stationary_orbit_check, stationary_orbit_order, stationary_variance_check)

SOLVERS = [
    pathwise_linear_solver(-1.0, 1.0),
    closed_form_solver(langevin(1.0, 1.0)),
    scheme_solver(langevin(1.0, 1.0), "em"),
    scheme_solver(langevin(1.0, 1.0), "milstein"),
    rk4_solver(lorenz()),
]


@pytest.mark.parametrize("solver", SOLVERS, ids=lambda s: s.label)
def test_phi_zero_is_identity(solver):
    x = np.array([0.3, -1.2, 2.0])[: 3 if "lorenz" in solver.label else 1]
    p = sample_path(1, 1, 0.0, 1.0, 0.01)
    out = solver(0.0, p, x)
    assert np.array_equal(out, x) and out is not x
    assert cocycle_check(solver, 0.0, 0.4, x, p) == 0.0


def test_negative_times_rejected():
    p = sample_path(1, 1, 0.0, 1.0, 0.01)
    with pytest.raises(ValidationError):
        pathwise_linear_solver()(-0.1, p, [0.0])
    with pytest.raises(ValidationError):
        cocycle_check(pathwise_linear_solver(), -0.1, 0.2, [0.0], p)


def test_window_overrun_is_range_error():
    p = sample_path(1, 1, 0.0, 1.0, 0.01)
    with pytest.raises(GridRangeError):
        cocycle_check(pathwise_linear_solver(), 0.5, 0.7, [0.0], p)


def test_pathwise_solver_zero_path_is_deterministic():
    p = BrownianPath.from_values(np.zeros(101), 0.01)
    assert pathwise_linear_solver(-1.0, 1.0)(1.0, p, [2.0])[0] == pytest.approx(2.0 * np.e)


def test_pathwise_solver_converges_to_ito_solution():
    # both discretize the same SDE; they agree to O(dt) on a shared fine path
    fine = sample_path(3, 1, 0.0, 1.0, 2.0**-12)
    gaps = []
    for f in (16, 4, 1):
        p = fine.coarsen(f)
        gaps.append(abs(pathwise_linear_solver(1.0, 1.0)(1.0, p, [0.5])[0]
                        - closed_form_solver(langevin(1.0, 1.0))(1.0, p, [0.5])[0]))
    assert gaps[0] > gaps[1] > gaps[2]


def test_ito_sum_closed_form_is_exactly_cocyclic():
    # the left-point Ito-sum closed form factorizes exactly on the grid
    m = linear_scalar(1.0, 0.0, 0.0, 1.0)
    p = sample_path(4, 1, 0.0, 1.2, 1e-3)
    assert cocycle_check(closed_form_solver(m), 0.5, 0.7, [0.3], p) < 1e-12


def test_pathwise_cocycle_order_at_least_one():
    dts, res, order = cocycle_order(pathwise_linear_solver(-1.0, 1.0), 0.5, 0.7, [0.3],
                                    [0.1 * 2.0**-k for k in range(2, 7)], _rng.derive_seeds(5, 20))
    assert order >= 0.9
    assert np.all(np.diff(res) < 0)


def test_rk4_deterministic_flow_cocycle():
    p = sample_path(1, 3, 0.0, 1.0, 1e-3)
    assert cocycle_check(rk4_solver(lorenz(eps=0.0)), 0.4, 0.3, [1.0, 1.0, 1.0], p) <= 1e-8


def test_em_cocycle_is_exact_on_grid():
    # one-step schemes restart cleanly at grid nodes
    p = sample_path(6, 1, 0.0, 1.0, 0.01)
    assert cocycle_check(scheme_solver(langevin(2.0, 0.5)), 0.3, 0.5, [1.0], p) < 1e-13


def test_stationary_orbit_basics():
    p = sample_path(7, 1, -20.0, 1.0, 1e-3)
    assert stationary_orbit_check(p, 1.0, 0.0, 20.0) == 0.0
    zero = BrownianPath.from_values(np.zeros(2001), 0.01, t_min=-20.0)
    assert ou_stationary_orbit(zero, 1.0, 20.0) == 0.0
    assert default_truncation(2.0) == 10.0
    with pytest.raises(GridRangeError):
        ou_stationary_orbit(sample_path(7, 1, -5.0, 1.0, 1e-3), 1.0, 20.0)
    with pytest.raises(ValidationError):
        ou_stationary_orbit(p, 0.0)
    with pytest.raises(GridRangeError):
        stationary_orbit_check(p, 1.0, 1.5, 20.0)


def test_truncation_tail_bound():
    # E|tail|^2 = exp(-2 b T) / (2 b)
    assert np.exp(-2 * 20.0) / 2 == pytest.approx(2.1e-18, rel=0.02)
    b = 2.0
    p = sample_path(9, 1, -default_truncation(b), 0.0, 1e-3)
    full = ou_stationary_orbit(p, b)
    short = ou_stationary_orbit(p, b, 5.0)
    assert abs(full - short) < 10 * np.sqrt(np.exp(-2 * b * 5.0) / (2 * b))


def test_stationary_orbit_order():
    dts, res, order = stationary_orbit_order(1.0, 0.5, [2.0**-k for k in range(6, 11)],
                                             _rng.derive_seeds(6, 10), T_trunc=20.0)
    assert order >= 0.9


def test_shift_rebasing_sanity():
    dt = 1e-2
    p = sample_path(10, 1, -20.0, 1.0, dt)
    base = stationary_orbit_check(p, 1.0, 0.5, 20.0)
    # adding a constant everywhere changes nothing: paths are re-anchored at 0
    same = BrownianPath.from_values(p.values[:, 0] + 3.0, dt, t_min=-20.0)
    assert stationary_orbit_check(same, 1.0, 0.5, 20.0) == pytest.approx(base, abs=1e-12)
    # a constant added to the positive segment only is a jump at 0+; both sides see it
    # (the identity holds pathwise), so the residual moves only at quadrature level
    i0 = p.index(0.0)
    vals = p.values[:, 0].copy()
    vals[i0 + 1 :] += 0.7
    jumped = BrownianPath.from_values(vals, dt, t_min=-20.0)
    moved = abs(stationary_orbit_check(jumped, 1.0, 0.5, 20.0) - base)
    assert 1e-6 < moved < 0.7 * dt
    vals[i0 + 1 :] -= 0.7
    assert stationary_orbit_check(BrownianPath.from_values(vals, dt, t_min=-20.0), 1.0, 0.5, 20.0) == \
        pytest.approx(base, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(k=st.integers(1, 50))
def test_shifted_orbit_reads_shifted_noise(k):
    p = sample_path(11, 1, -10.0, 1.0, 0.02)
    t = 0.02 * k
    shifted = wiener_shift(p, t)
    direct = ou_stationary_orbit(shifted, 1.0, 9.0)
    i0, i1 = p.index(t - 9.0), p.index(t)
    W = p.values[i0 : i1 + 1, 0]
    s = p.times[i0:i1] - t
    assert direct == pytest.approx(np.sum(np.exp(s) * np.diff(W)), abs=1e-12)


def test_stationary_variance_small():
    rep = stationary_variance_check(2.0, _rng.derive_seeds(12, 2000), dt=1e-2)
    assert rep.passed and rep.target == 0.25
    rec = rep.to_record()
    assert rec["n"] == 2000 and rec["pass"] is True
