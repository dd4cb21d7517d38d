import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stokit import _rng
from stokit.brownian import BrownianPath, sample_block, sample_path
from stokit.errors import CapabilityError, ValidationError
from stokit.integrators import integrate_block, milstein
from stokit.manifolds import (CharacteristicField, ManifoldSpec, characteristics_solve,
                              circle_benchmark_surface, circle_spec, ellipse_spec, extract_zero_set,
                              invariance_characteristic_field, manifold_invariance_mc,
                              noncharacteristic_check, restrict_circle, tangency_residual,
                              zero_threshold)
from stokit.models import SdeModel, circle_manifold, langevin

ANGLES = np.linspace(0, 2 * np.pi, 360, endpoint=False)


def _on_circle(r=1.0):
    return r * np.stack([np.cos(ANGLES), np.sin(ANGLES)], axis=-1)


def _rotation_flow():
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    return SdeModel(2, 1, lambda x, t: x @ rot.T, lambda x, t: np.zeros(np.shape(x) + (1,)),
                    jacobians_fn=lambda x, t: np.zeros(np.shape(x)[:-1] + (1, 2, 2)), label="rotation")


def test_circle_tangency_residuals():
    m = circle_manifold()
    for r in (1.0, 2.0):
        r_mu, r_sigma = tangency_residual(m, circle_spec(r), _on_circle(r))
        assert np.max(np.abs(r_mu)) <= 1e-12 and np.max(np.abs(r_sigma)) <= 1e-12
        assert r_sigma.shape == (360, 1)
    assert zero_threshold(m) == 1e-10


def test_zero_diffusion_reduces_to_first_integral():
    m = _rotation_flow()
    x = np.random.default_rng(0).normal(size=(20, 2))
    r_mu, r_sigma = tangency_residual(m, circle_spec(), x)
    assert np.all(r_sigma == 0.0)
    assert np.allclose(r_mu, np.sum(m.drift(x) * circle_spec().grad_G(x), axis=-1), atol=1e-14)
    r_mu2, _ = tangency_residual(m, ellipse_spec(), x)
    assert np.max(np.abs(r_mu2)) > 0.1


def test_missing_jacobians_and_bad_points():
    m = SdeModel(2, 1, lambda x, t: -x, lambda x, t: np.ones(np.shape(x) + (1,)))
    with pytest.raises(CapabilityError):
        tangency_residual(m, circle_spec(), np.array([1.0, 0.0]))
    assert zero_threshold(m.with_fd_jacobians()) == 1e-6
    with pytest.raises(ValidationError):
        tangency_residual(circle_manifold(), circle_spec(), np.array([np.nan, 0.0]))


def test_spec_gradient_probe():
    with pytest.raises(ValidationError):
        ManifoldSpec(lambda x: np.sum(x**2, axis=-1), lambda x: x, n=2)
    assert circle_spec().gradient_probe_error() < 1e-8


@settings(max_examples=30, deadline=None)
@given(lam=st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3), seed=st.integers(0, 1000))
def test_residuals_scale_linearly(lam, seed):
    m = circle_manifold()
    x = np.random.default_rng(seed).normal(size=(5, 2))
    spec = ellipse_spec()
    r_mu, r_sigma = tangency_residual(m, spec, x)
    s_mu, s_sigma = tangency_residual(m, spec.scaled(lam), x)
    assert np.allclose(s_mu, lam * r_mu, rtol=1e-12, atol=1e-12)
    assert np.allclose(s_sigma, lam * r_sigma, rtol=1e-12, atol=1e-12)


def _line_field(a, c, h=lambda s: s):
    a = np.asarray(a, dtype=float)
    return CharacteristicField(
        a=lambda x, u: np.broadcast_to(a, x.shape),
        c=lambda x, u: np.full(np.shape(u), float(c)),
        gamma0=lambda s: (np.stack([np.zeros(len(s)), s[:, 0]], axis=-1), h(s[:, 0])),
        n=2,
    )


def test_constant_transport_straight_lines():
    f = _line_field([1.0, 0.5], 0.0, h=lambda s: s**2)
    surf = characteristics_solve(f, np.linspace(-1, 1, 5), (-1.0, 2.0), 0.01)
    assert np.allclose(surf.x[:, surf.times == 0.0][:, 0], f.gamma0(surf.params)[0])
    expected = f.gamma0(surf.params)[0][:, None] + surf.times[None, :, None] * np.array([1.0, 0.5])
    assert np.allclose(surf.x, expected, atol=1e-12)
    assert np.allclose(surf.u, surf.params[:, :1] ** 2, atol=1e-14)
    assert not surf.truncated.any()


def test_unit_source_grows_linearly():
    surf = characteristics_solve(_line_field([1.0, 0.0], 1.0), np.linspace(0, 1, 3), (0.0, 1.5), 0.01)
    assert np.allclose(surf.u - surf.u[:, :1], surf.times[None], atol=1e-12)


def test_rotation_characteristics_are_circles():
    f = invariance_characteristic_field(
        circle_manifold(), 0, lambda s: (np.stack([s[:, 0], np.zeros(len(s))], axis=-1), s[:, 0]))
    surf = characteristics_solve(f, np.array([0.5, 1.0, 2.0]), (0.0, 2 * np.pi), 2 * np.pi / 1000)
    radii = np.linalg.norm(surf.x, axis=-1)
    assert np.max(np.abs(radii - surf.params)) <= 1e-8
    assert np.allclose(surf.u, surf.params, atol=0)


def test_bounding_box_truncates():
    f = _line_field([1.0, 0.0], 0.0)
    surf = characteristics_solve(f, np.linspace(0, 1, 3), (-2.0, 2.0), 0.01, bbox=[(-1.0, 1.0), (-5, 5)])
    assert surf.truncated.all()
    assert np.all(np.abs(surf.x[surf.valid][:, 0]) <= 1.0)
    inside = surf.valid[0]
    assert inside[surf.times == 0.0].all() and not inside[0] and not inside[-1]


def test_noncharacteristic_cases():
    ok = noncharacteristic_check(_line_field([1.0, 0.0], 0.0), np.linspace(0, 1, 5))
    assert ok and ok.failing.size == 0
    # gamma0 is itself an integral curve of a = (0, 1) with c = 1 and u = s
    bad = noncharacteristic_check(_line_field([0.0, 1.0], 1.0), np.linspace(0, 1, 5))
    assert not bad and bad.failing.size == 5
    with pytest.raises(ValidationError):
        characteristics_solve(_line_field([0.0, 1.0], 1.0), np.linspace(0, 1, 5), (0, 1), 0.1)


def test_noncharacteristic_borderline_angle():
    angle = 1e-9
    f = _line_field([np.sin(angle), np.cos(angle)], 1.0)
    rep = noncharacteristic_check(f, np.array([0.3]))
    assert not rep and 0 < rep.singular_values[0] < 1e-8


def test_degenerate_gamma0():
    f = CharacteristicField(lambda x, u: np.ones_like(x), lambda x, u: np.zeros_like(u),
                            lambda s: (np.zeros((len(s), 2)), np.zeros(len(s))), 2)
    with pytest.raises(ValidationError):
        noncharacteristic_check(f, np.linspace(0, 1, 3))


def test_zero_set_linear_and_empty():
    f = _line_field([1.0, 0.0], 1.0, h=lambda s: np.full_like(s, -1.0))
    surf = characteristics_solve(f, np.array([0.0, 0.5]), (0.0, 2.0), 0.4)
    zs = extract_zero_set(surf, across=False)
    # u = t - 1 along x = t: zero at x = 1 exactly
    assert np.allclose(zs.points[:, 0], 1.0, atol=1e-14) and zs.notice is None
    pos = characteristics_solve(_line_field([1.0, 0.0], 1.0, h=lambda s: 1.0 + s**2),
                                np.array([0.0, 0.5]), (0.0, 1.0), 0.1)
    empty = extract_zero_set(pos)
    assert len(empty) == 0 and "sign change" in empty.notice


def test_circle_benchmark_zero_set():
    surf = circle_benchmark_surface()
    zs = extract_zero_set(surf)
    assert len(zs) > 1000
    assert np.max(np.abs(np.sum(zs.points**2, axis=-1) - 1.0)) <= 1e-6
    ang = np.sort(np.arctan2(zs.points[:, 1], zs.points[:, 0]))
    assert np.max(np.diff(np.concatenate([ang, ang[:1] + 2 * np.pi]))) < 0.05


def test_invariance_mc_circle_and_control():
    m = circle_manifold()
    rep = manifold_invariance_mc(m, circle_spec(), [1.0, 0.0], 400, 2.0**-6, 1.0, master_seed=3, levels=3)
    assert np.all((rep.ratios >= 1.5) & (rep.ratios <= 3.0))
    ctl = manifold_invariance_mc(m, ellipse_spec(), [1.0, 0.0], 400, 2.0**-6, 1.0, master_seed=3, levels=3)
    assert np.all(ctl.median_max > 0.3) and np.all(ctl.ratios < 1.2)
    assert ctl.median_max.min() > 20 * rep.median_max.max()
    rec = rep.to_record()
    assert len(rec["ratios"]) == 2 and rec["n_paths"] == 400


def test_invariance_mc_deterministic_first_integral():
    rep = manifold_invariance_mc(_rotation_flow(), circle_spec(), [1.0, 0.0], 1, 0.01, 1.0,
                                 levels=3, scheme="em")
    # Euler on a rotation inflates |x|^2 by (1 + dt^2) per step
    assert rep.median_max == pytest.approx((1 + rep.dts**2) ** (1.0 / rep.dts) - 1, rel=1e-9)
    assert np.allclose(rep.ratios, 2.0, rtol=0.01)


def test_invariance_mc_requires_point_on_manifold():
    with pytest.raises(ValidationError):
        manifold_invariance_mc(circle_manifold(), circle_spec(), [1.1, 0.0], 10, 0.01, 1.0)


def test_restrict_circle_exact_and_trivial():
    m = circle_manifold()
    p = sample_path(1, 1, 0.0, 1.0, 0.01)
    tr = restrict_circle(m, 0.3, p)
    assert np.max(np.abs(np.sum(tr.states**2, axis=-1) - 1.0)) <= 1e-15
    fixed = restrict_circle(m, 0.0, BrownianPath.from_values(np.zeros(11), 0.1))
    assert np.all(fixed.states == np.array([1.0, 0.0]))
    with pytest.raises(CapabilityError):
        restrict_circle(langevin(), 0.0, p)


def test_restrict_circle_matches_milstein():
    m = circle_manifold()
    seeds = _rng.derive_seeds(8, 200)
    Wf = sample_block(seeds, 1, 2**10, 2.0**-10)
    theta = Wf[:, -1, 0]
    exact = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    dts, rms = [], []
    for f in (32, 16, 8, 4):
        X, _ = integrate_block(m, np.array([1.0, 0.0]), Wf[:, ::f], 0.0, f * 2.0**-10, "milstein")
        rms.append(np.sqrt(np.mean(np.sum((X[:, -1] - exact) ** 2, axis=-1))))
        dts.append(f * 2.0**-10)
    assert np.polyfit(np.log(dts), np.log(rms), 1)[0] >= 0.5
    # single-path API agrees with the block integrator
    path = BrownianPath.from_values(Wf[0], 2.0**-10)
    lifted = restrict_circle(m, 0.0, path)
    assert np.allclose(lifted.terminal, exact[0], atol=1e-14)
    assert np.linalg.norm(milstein(m, [1.0, 0.0], path, 0.0, 1.0).terminal - lifted.terminal) < 0.05
