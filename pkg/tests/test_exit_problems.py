import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_bvp

from stokit.errors import CensoringError, SingularOperatorError, UndefinedQuantileError, ValidationError
from stokit.exit_problems import (Domain, assemble_generator, average_escape_probability,
                                  escape_probability, mc_exit, mean_residence_time, monitoring_bias,
                                  predictability_window)
from stokit.models import SdeModel, ScalarObservable, apply_generator


def drifted(b, s=1.0, n=1):
    """Constant drift ``b`` and constant diffusion matrix ``s`` in ``n`` dimensions."""
    b = np.broadcast_to(np.asarray(b, dtype=float), (n,))
    s = np.asarray(s, dtype=float) * (np.eye(n) if np.ndim(s) == 0 else 1.0)
    return SdeModel(n, n, lambda x, t: np.broadcast_to(b, np.shape(x)).copy(),
                    lambda x, t: np.broadcast_to(s, np.shape(x) + (n,)).copy(), validate=False)


def unit(h, gamma=("right",), d=1):
    return Domain(((0.0, 1.0),) * d, h, gamma)


def test_laplacian_stencil_1d():
    gen = assemble_generator(drifted(0.0), unit(0.1))
    M = gen.matrix.toarray()
    row = M[4]  # interior node 5 in a 11-node grid
    assert np.allclose(row[4:7], np.array([1.0, -2.0, 1.0]) / (2 * 0.01))
    assert np.count_nonzero(row) == 3
    assert np.allclose(M.sum(axis=1), 0.0, atol=1e-9)


def test_five_point_laplacian_2d():
    dom = Domain(((0.0, 1.0), (0.0, 2.0)), (0.25, 0.5), "all")
    M = assemble_generator(drifted(0.0, 1.0, 2), dom).matrix.toarray()
    ny = dom.shape[1]
    k = 2 * ny + 2  # node (2, 2), interior
    r = M[list(gen_interior(dom)).index(k)]
    assert r[k] == pytest.approx(-(1 / 0.0625 + 1 / 0.25))
    assert r[k + ny] == r[k - ny] == pytest.approx(0.5 / 0.0625)
    assert r[k + 1] == r[k - 1] == pytest.approx(0.5 / 0.25)
    assert np.count_nonzero(r) == 5


def gen_interior(dom):
    return np.flatnonzero(dom.interior_mask.ravel())


@pytest.mark.parametrize("d", [1, 2])
def test_generator_exact_on_quadratics(d):
    # central differences (including the mixed cross term) are exact for quadratics
    if d == 1:
        model, dom = drifted(0.3, 0.8), unit(0.1)
        A = np.array([[1.5]])
        c = np.array([0.7])
    else:
        sig = np.array([[1.0, 0.0], [0.5, 0.8]])
        model, dom = drifted([0.2, -0.1], sig, 2), unit(0.125, "all", 2)
        A = np.array([[1.0, 1.5], [1.5, -1.0]])
        c = np.array([1.0, -2.0])
    obs = ScalarObservable(lambda t, x: np.einsum("...i,ij,...j->...", x, A, x) + x @ c,
                           lambda t, x: 2 * x @ A + c,
                           lambda t, x: np.broadcast_to(2 * A, np.shape(x)[:-1] + A.shape))
    gen = assemble_generator(model, dom)
    assert not gen.upwinded.any()
    pts = dom.points
    lhs = gen.matrix @ obs.g(0.0, pts)
    rhs = apply_generator(model, obs, pts[gen.interior])
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_upwind_sign_audit():
    dom = unit(0.05)
    for b in (40.0, -40.0):
        gen = assemble_generator(drifted(b), dom)
        assert gen.upwinded.all()
        M = gen.matrix.toarray()
        diag = M[np.arange(M.shape[0]), gen.interior]
        off = M.copy()
        off[np.arange(M.shape[0]), gen.interior] = 0.0
        assert np.all(diag < 0) and np.all(off >= 0)
        assert np.allclose(M.sum(axis=1), 0.0, atol=1e-9)
    # central differencing would give a negative neighbour weight here
    assert not assemble_generator(drifted(10.0), dom).upwinded.any()


def test_pure_drift_axis_upwinds_and_zero_row_is_singular():
    gen = assemble_generator(drifted(1.0, 0.0), unit(0.1))
    assert gen.upwinded.all()
    p = escape_probability(drifted(1.0, 0.0), unit(0.1))
    # transport to the right carries the value from gamma to every non-left node
    assert np.allclose(p.values[1:], 1.0) and p.values[0] == 0.0
    with pytest.raises(SingularOperatorError):
        assemble_generator(drifted(0.0, 0.0), unit(0.1))


def test_diagonal_dominance_required():
    sig = np.array([[1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(ValidationError):
        assemble_generator(drifted([0.0, 0.0], sig, 2), unit(0.25, "all", 2))
    with pytest.raises(ValidationError):
        assemble_generator(drifted(0.0), unit(0.25, "all", 2))


def test_domain_validation():
    with pytest.raises(ValidationError):
        Domain(((0.0, 1.0),), 0.3)
    with pytest.raises(ValidationError):
        Domain(((0.0, 1.0),), 0.5, ("up",))
    with pytest.raises(ValidationError):
        Domain(((0.0, 1.0),), 1.0)
    with pytest.raises(ValidationError):
        escape_probability(drifted(0.0), Domain(((0.0, 1.0),), 0.1, ()))
    d = Domain(((0.0, 1.0), (0.0, 1.0)), 0.5, "left, top")
    assert d.gamma == ("left", "top") and d.gamma_mask.sum() == 5


def test_brownian_escape_and_residence_1d():
    h = 0.005
    dom = unit(h)
    p = escape_probability(drifted(0.0), dom)
    x = dom.axes[0]
    assert np.max(np.abs(p.values - x)) <= 2 * h * h
    u = mean_residence_time(drifted(0.0), dom)
    assert np.max(np.abs(u.values - x * (1 - x))) <= 2 * h * h
    assert u.at([0.5])[0] == pytest.approx(0.25, abs=2 * h * h)
    assert abs(average_escape_probability(p) - 0.5) <= 2 * h * h
    # boundary data imposed exactly
    assert p.values[0] == 0.0 and p.values[-1] == 1.0 and u.values[0] == u.values[-1] == 0.0


def test_gamma_all_and_complements():
    m = drifted([0.4, -0.7], np.array([[1.0, 0.0], [0.3, 0.6]]), 2)
    full = escape_probability(m, unit(0.1, "all", 2))
    assert np.allclose(full.values, 1.0, atol=1e-12)
    assert average_escape_probability(full) == pytest.approx(1.0)
    def sides(pts):
        return (pts[:, 0] == 0.0) | (pts[:, 0] == 1.0)

    a = escape_probability(m, unit(0.1, sides, 2))
    b = escape_probability(m, unit(0.1, lambda pts: ~sides(pts), 2))
    assert np.allclose(a.values + b.values, 1.0, atol=1e-12)


def test_mirror_symmetry_gives_half():
    p = escape_probability(drifted(0.0), unit(0.01))
    assert average_escape_probability(p) == pytest.approx(0.5, abs=1e-12)
    dom = Domain(((-1.0, 1.0), (0.0, 1.0)), 0.1, ("right",))
    q = escape_probability(drifted([0.0, 0.3], 1.0, 2), dom)
    # mirror image in x gives the left-side problem; the two fields reflect into each other
    r = escape_probability(drifted([0.0, 0.3], 1.0, 2), Domain(dom.bounds, dom.h, ("left",)))
    assert np.allclose(q.values, r.values[::-1], atol=1e-12)


def test_2d_brownian_centre_and_max_principle():
    dom = unit(0.02, ("right",), 2)
    p = escape_probability(drifted([0.0, 0.0], 1.0, 2), dom)
    assert p.at([0.5, 0.5])[0] == pytest.approx(0.25, abs=1e-3)
    assert p.values.min() >= 0.0 and p.values.max() <= 1.0


@settings(max_examples=25, deadline=None)
@given(bx=st.floats(-30, 30), by=st.floats(-30, 30), sx=st.floats(0.1, 2), sy=st.floats(0.1, 2),
       rho=st.floats(-0.9, 0.9), sides=st.sets(st.sampled_from(["left", "right", "bottom", "top"]), min_size=1))
def test_maximum_principle_property(bx, by, sx, sy, rho, sides):
    # diagonal dominance |rho sx sy| <= min(sx^2, sy^2) keeps the cross stencil admissible
    rho = float(np.clip(rho, -min(sx, sy) / max(sx, sy), min(sx, sy) / max(sx, sy)))
    sig = np.array([[sx, 0.0], [rho * sy, np.sqrt(1 - rho**2) * sy]])
    dom = unit(0.1, tuple(sorted(sides)), 2)
    m = drifted([bx, by], sig, 2)
    p = escape_probability(m, dom)
    assert p.values.min() >= -1e-9 and p.values.max() <= 1 + 1e-9
    assert mean_residence_time(m, dom).values.min() >= -1e-12


def _drifted_escape(b, x):
    return (1 - np.exp(-2 * b * x)) / (1 - np.exp(-2 * b))


def test_h_refinement_central_regime():
    b = 1.0
    errs = []
    for h in (0.05, 0.025, 0.0125):
        dom = unit(h)
        p = escape_probability(drifted(b), dom)
        assert not assemble_generator(drifted(b), dom).upwinded.any()
        errs.append(np.max(np.abs(p.values - _drifted_escape(b, dom.axes[0]))))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios > 3.5) & (ratios < 4.5))


def test_h_refinement_upwinded_regime():
    D = 0.01
    model = SdeModel(1, 1, lambda x, t: 1 + x, lambda x, t: np.full(np.shape(x) + (1,), np.sqrt(D)),
                     validate=False)
    grid = np.linspace(0, 1, 2001)
    sol = solve_bvp(lambda x, y: np.vstack([y[1], -2 * (1 + (1 + x) * y[1]) / D]),
                    lambda a, c: np.array([a[0], c[0]]), grid, np.zeros((2, grid.size)),
                    tol=1e-10, max_nodes=10**6)
    assert sol.status == 0
    exact = sol.sol(0.5)[0]
    errs = []
    for h in (0.04, 0.02, 0.01):
        dom = unit(h)
        assert assemble_generator(model, dom).upwinded.all()
        errs.append(abs(mean_residence_time(model, dom).at([0.5])[0] - exact))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios > 1.7) & (ratios < 2.3))


def test_shrinking_domain_residence():
    peaks = []
    for w in (1.0, 0.5, 0.25, 0.125):
        u = mean_residence_time(drifted(0.0), Domain(((0.0, w),), w / 20))
        peaks.append(u.values.max())
    assert np.all(np.diff(peaks) < 0)
    assert peaks == pytest.approx([w * w / 4 for w in (1.0, 0.5, 0.25, 0.125)], rel=1e-9)


def test_drift_toward_gamma_reduces_residence():
    h = 0.01
    base = mean_residence_time(drifted(0.0), unit(h)).values
    # strong drift (b h > 1): smaller at every interior node
    strong = mean_residence_time(drifted(150.0), unit(h)).values
    assert np.all(strong[1:-1] < base[1:-1])
    # moderate drift: smaller away from the upstream wall, where the push off the wall
    # lengthens short residences
    mod = mean_residence_time(drifted(5.0), unit(h)).values
    x = unit(h).axes[0]
    away = (x >= 0.25) & (x < 1)
    assert np.all(mod[away] < base[away])


def test_mc_matches_fd_1d():
    dom = unit(0.005)
    m = drifted(0.0)
    dt = 1e-3
    p = escape_probability(m, dom).at([0.25])[0]
    stats = mc_exit(m, [0.25], dom, 4000, dt, master_seed=1)
    assert stats.censored == 0 and np.all(stats.exit_times > 0)
    assert abs(stats.gamma_probability - p) <= 3 * stats.gamma_probability_se + monitoring_bias(dt)
    u = mean_residence_time(m, dom).at([0.5])[0]
    s2 = mc_exit(m, [0.5], dom, 4000, dt, master_seed=2)
    assert abs(s2.mean_exit_time - u) <= 3 * s2.mean_exit_time_se + monitoring_bias(dt)
    rec = s2.to_record()
    assert rec["n_paths"] == 4000 and set(rec["quantiles"]) == {"0.1", "0.25", "0.5", "0.75", "0.9"}


def test_mc_matches_fd_2d():
    dom = unit(0.02, ("right",), 2)
    m = drifted([0.3, 0.0], 1.0, 2)
    dt = 1e-3
    p = escape_probability(m, dom).at([0.5, 0.5])[0]
    u = mean_residence_time(m, dom).at([0.5, 0.5])[0]
    stats = mc_exit(m, [0.5, 0.5], dom, 3000, dt, master_seed=3)
    assert abs(stats.gamma_probability - p) <= 3 * stats.gamma_probability_se + monitoring_bias(dt)
    assert abs(stats.mean_exit_time - u) <= 3 * stats.mean_exit_time_se + monitoring_bias(dt)


def test_bridge_correction_removes_monitoring_bias():
    dom = unit(0.01)
    m = drifted(0.0)
    plain = mc_exit(m, [0.5], dom, 4000, 1e-2, master_seed=4)
    bridged = mc_exit(m, [0.5], dom, 4000, 1e-2, master_seed=4, bridge_correction=True)
    assert plain.mean_exit_time - 0.25 > 3 * plain.mean_exit_time_se
    assert abs(bridged.mean_exit_time - 0.25) <= 3 * bridged.mean_exit_time_se
    assert bridged.bridge_correction


def test_mc_exit_deterministic_across_workers():
    dom = unit(0.1, ("right",), 2)
    m = drifted([0.2, 0.0], 1.0, 2)
    a = mc_exit(m, [0.3, 0.6], dom, 2500, 1e-3, master_seed=5, workers=1)
    b = mc_exit(m, [0.3, 0.6], dom, 2500, 1e-3, master_seed=5, workers=3)
    assert np.array_equal(a.exit_times, b.exit_times) and np.array_equal(a.gamma_hits, b.gamma_hits)


def test_corner_exit_goes_to_gamma():
    m = drifted([1.0, 1.0], 0.0, 2)
    top = mc_exit(m, [0.5, 0.5], unit(0.1, ("top",), 2), 5, 0.01)
    assert top.gamma_hits.all() and top.gamma_probability == 1.0
    left = mc_exit(m, [0.5, 0.5], unit(0.1, ("left",), 2), 5, 0.01)
    assert not left.gamma_hits.any()
    assert top.mean_exit_time == pytest.approx(0.5, abs=0.011)


def test_mc_exit_errors():
    dom = unit(0.1)
    with pytest.raises(ValidationError):
        mc_exit(drifted(0.0), [0.0], dom, 10, 1e-3)
    with pytest.raises(ValidationError):
        mc_exit(drifted(0.0), [1.2], dom, 10, 1e-3)
    with pytest.raises(ValidationError):
        mc_exit(drifted(0.0, 1.0, 2), [0.5, 0.5], dom, 10, 1e-3)
    with pytest.raises(CensoringError):
        mc_exit(drifted(0.0), [0.5], dom, 500, 1e-3, t_max=0.05)


def test_predictability_median_and_scaling():
    dom = unit(0.1)
    m = drifted(0.0)
    w = predictability_window(m, [0.5], dom, 0.5, 2000, 1e-3, master_seed=6, n_boot=400)
    assert w.ci_low <= w.time <= w.ci_high
    big = predictability_window(m, [1.0], Domain(((0.0, 2.0),), 0.2), 0.5, 2000, 4e-3,
                                master_seed=6, n_boot=400)
    assert big.time == pytest.approx(4 * w.time, rel=1e-12)
    assert 4 * w.ci_low <= big.time <= 4 * w.ci_high


def test_predictability_small_q_is_minimum():
    dom = unit(0.1)
    m = drifted(0.0)
    stats = mc_exit(m, [0.5], dom, 500, 1e-3, master_seed=7)
    w = predictability_window(m, [0.5], dom, 1e-9, 500, 1e-3, master_seed=7, n_boot=50)
    assert w.time == stats.exit_times.min()


def test_predictability_errors():
    dom = unit(0.1)
    m = drifted(0.0)
    with pytest.raises(ValidationError):
        predictability_window(m, [0.5], dom, 1.0, 100, 1e-3)
    # about 9% of paths outlive t_max: allowed by the run, but above the 5% upper tail
    with pytest.raises(UndefinedQuantileError):
        predictability_window(m, [0.5], dom, 0.95, 2000, 1e-3, t_max=0.57)
    ok = predictability_window(m, [0.5], dom, 0.5, 2000, 1e-3, t_max=0.57, n_boot=50)
    assert ok.censored > 0.05 * 2000 and np.isfinite(ok.time)
