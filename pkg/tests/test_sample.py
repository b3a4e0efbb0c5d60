import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from nvsolid import sample
from nvsolid.constants import MAGIC_ANGLE
from nvsolid.sample import GeometryConfig, GeometryError, ShiftTensor


def random_directions(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_secular_shift_on_principal_axes():
    t = ShiftTensor((352.0, 22.0, 456.0), (0.4, 1.1, -0.7))
    R = t.rotation()
    for i, val in enumerate(t.principal_values):
        assert sample.secular_shift(t, R[:, i]) == pytest.approx(val, abs=1e-9)


def test_isotropic_average_of_secular_shift(rng):
    t = ShiftTensor((221.0, 27.0, 74.0), (1.0, 0.5, 2.0))
    shifts = sample.secular_shift(t, random_directions(rng, 200_000))
    assert shifts.mean() == pytest.approx(107.333333, abs=0.5)


@settings(max_examples=30, deadline=None)
@given(st.tuples(*[st.floats(-500, 500)] * 3), st.tuples(*[st.floats(-3, 3)] * 3))
def test_lab_tensor_trace_is_rotation_invariant(vals, euler):
    t = ShiftTensor(vals, euler)
    assert np.trace(t.lab_tensor()) == pytest.approx(sum(vals), abs=1e-9)
    assert t.iso() == pytest.approx(sum(vals) / 3, abs=1e-12)


def test_dipolar_anchor_and_scaling():
    assert sample.dipolar_prefactor(0.25e-9) == pytest.approx(14.9e3, rel=1e-12)
    assert sample.dipolar_prefactor(0.5e-9) == pytest.approx(14.9e3 / 8, rel=1e-12)


def test_dipolar_secular_vanishes_at_magic_angle():
    pair = sample.PairCluster.build([[0, 0, 0], [0, 0, 0.25e-9]], (ShiftTensor((0, 0, 0)),) * 2)
    b = np.array([np.sin(MAGIC_ANGLE), 0.0, np.cos(MAGIC_ANGLE)])
    assert abs(sample.dipolar_secular(pair, b)) < 1e-9
    assert sample.dipolar_secular(pair, [0, 0, 1.0]) == pytest.approx(14.9e3)
    with pytest.raises(ValueError):
        sample.dipolar_secular(pair, [0, 0, 2.0])


@pytest.mark.parametrize("x", [0.0, 1.36e-5, 0.5, 3.0])
def test_bloch_sampler_matches_polar_cdf(x):
    b = sample.sample_bloch(100_000, x, np.random.default_rng(7))
    res = stats.kstest(np.cos(b.theta), lambda c: 1.0 - sample.cos_cdf_from_top(c, x))
    assert res.statistic < 0.005
    assert stats.kstest(b.phi / (2 * np.pi), "uniform").statistic < 0.005


def test_mean_cos_theta_at_half():
    # 1/x - coth(x) at x = 0.5
    assert sample.mean_cos_theta(0.5) == pytest.approx(-0.16395, abs=1e-5)
    b = sample.sample_bloch(400_000, 0.5, np.random.default_rng(1))
    assert np.cos(b.theta).mean() == pytest.approx(-0.16395, abs=3e-3)


@pytest.mark.parametrize("x", [0.0, 1e-4, 0.5, 2.0])
def test_mean_sin2_theta(x):
    b = sample.sample_bloch(400_000, x, np.random.default_rng(2))
    assert sample.mean_sin2_theta(x) == pytest.approx(np.mean(np.sin(b.theta) ** 2), abs=2e-3)


def test_sampler_rejects_bad_input(rng):
    with pytest.raises(ValueError):
        sample.sample_bloch(0, 0.1, rng)
    with pytest.raises(ValueError):
        sample.sample_bloch(10, -0.1, rng)


def test_thermal_x_room_temperature():
    assert sample.thermal_x(2.0, 300.0) == pytest.approx(1.3622e-5, rel=1e-3)


def test_region_sampling_and_volume(rng):
    d = 5e-9
    pts = sample.uniform_in_region(50_000, d, rng)
    assert sample.inside_region(pts, d).all()
    box = rng.uniform([-d, -d, d], [d, d, 2 * d], size=(400_000, 3))
    frac = sample.inside_region(box, d).mean()
    assert frac * 4 * d**3 == pytest.approx(sample.region_volume(d), rel=0.01)


def test_f2_quadrature_matches_monte_carlo(rng):
    d = 5e-9
    pts = sample.uniform_in_region(400_000, d, rng)
    r = np.linalg.norm(pts, axis=1)
    g = (3 * (pts[:, 2] / r) ** 2 - 1) / r**3
    mc = np.mean(g**2) * sample.region_volume(d)
    assert sample.f2_quadrature(d) == pytest.approx(mc, rel=0.05)


def test_on_axis_coupling_weight():
    r = 5e-9
    w = sample.coupling_weight([0.0, 0.0, r])
    assert w == pytest.approx(-2 * sample.coupling_prefactor() / r**3, rel=1e-12)
    # the geometric factor vanishes on the magic-angle cone
    pos = r * np.array([np.sin(MAGIC_ANGLE), 0.0, np.cos(MAGIC_ANGLE)])
    assert abs(sample.coupling_weight(pos)) < 1e-12 * abs(w)


def test_place_pairs_respects_constraints(rng):
    cfg = GeometryConfig(pair_count=16)
    geom, pairs = sample.place_pairs(cfg, rng)
    assert len(pairs) == 16 and geom.positions.shape == (32, 3)
    assert sample.inside_region(geom.positions, cfg.nv_depth).all()
    for k, pr in enumerate(pairs):
        assert pr.distance == pytest.approx(cfg.internuclear_distance, rel=1e-9)
        assert pr.tensors[0].iso() == pytest.approx(830 / 3)
        assert pr.tensors[1].iso() == pytest.approx(322 / 3)
        others = np.delete(geom.positions, [2 * k, 2 * k + 1], axis=0)
        gaps = np.linalg.norm(others[:, None] - pr.positions[None], axis=-1)
        assert gaps.min() >= cfg.exclusion_radius
    assert np.allclose(geom.coupling_weights, sample.coupling_weight(geom.positions))


def test_place_pairs_reproducible():
    cfg = GeometryConfig(pair_count=4)
    a, _ = sample.place_pairs(cfg, np.random.default_rng(3))
    b, _ = sample.place_pairs(cfg, np.random.default_rng(3))
    assert np.array_equal(a.positions, b.positions)


def test_place_pairs_gives_up():
    cfg = GeometryConfig(nv_depth=1e-9, pair_count=200, max_attempts=2000)
    with pytest.raises(GeometryError):
        sample.place_pairs(cfg, np.random.default_rng(0))
