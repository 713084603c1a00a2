import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from fisheye_bev.errors import DomainError, FormatError
from fisheye_bev.gradcheck import random_gaussians, rel_err, splat_gradcheck
from fisheye_bev.lift import Gaussian3, Gaussians3, compose_covariance
from fisheye_bev.splat import (BevGridSpec, BevRaster, Gaussians2, load_raster, marginalize_to_ground,
                               normalize_backward, normalize_raster, raster_bytes, resample_raster,
                               save_raster, splat_backward, splat_forward, world_to_cell)

SPEC = BevGridSpec()


def one(mean, cov, w=1.0, feat=(1.0, 0.0, 0.0)):
    return Gaussians2(np.array([mean], float), np.array([cov], float), np.array([w]), np.array([feat], float))


def naive_splat(g: Gaussians2, spec: BevGridSpec) -> BevRaster:
    """All cells, no truncation, density from scipy."""
    x, y = spec.cell_centers()
    pts = np.stack([x.ravel(), y.ravel()], 1)
    mass = np.zeros(x.size)
    feats = np.zeros((x.size, spec.channels))
    for k in range(len(g)):
        dens = stats.multivariate_normal(g.means[k], g.covs[k]).pdf(pts) * spec.cell_area * g.weights[k]
        mass += dens
        feats += dens[:, None] * g.features[k]
    return BevRaster(spec, feats.reshape(spec.shape + (-1,)), mass.reshape(spec.shape))


def test_grid_defaults():
    assert SPEC.shape == (48, 64)
    assert SPEC.cell_area == 0.140625
    with pytest.raises(DomainError):
        BevGridSpec(x_range=(-12, 12.1))
    with pytest.raises(DomainError):
        BevGridSpec(resolution=0)


def test_world_to_cell():
    np.testing.assert_allclose(world_to_cell((-12 + 0.1875, -9 + 0.1875), SPEC), [0, 0])
    np.testing.assert_allclose(world_to_cell((0, 0), SPEC), [31.5, 23.5])
    np.testing.assert_allclose(world_to_cell((12, 9), SPEC), [63.5, 47.5])
    x, y = SPEC.cell_centers()
    np.testing.assert_allclose(world_to_cell((x[5, 7], y[5, 7]), SPEC), [7, 5], atol=1e-12)


def test_marginalize():
    g = marginalize_to_ground(Gaussian3(np.array([1.0, 2.0, 3.0]), np.eye(3), 0.5, np.array([1.0])))
    np.testing.assert_array_equal(g.covs[0], np.eye(2))
    np.testing.assert_array_equal(g.means[0], [1, 2])
    S = compose_covariance(0.3, (0.2, -0.5, 0.7))
    g = marginalize_to_ground(Gaussian3(np.zeros(3), S, 1.0, np.zeros(0)))
    np.testing.assert_allclose(g.covs[0], 0.09 * np.eye(2) + np.outer([0.2, -0.5], [0.2, -0.5]), atol=1e-15)


def test_marginal_matches_z_integration(rng):
    for _ in range(3):
        A = rng.normal(size=(3, 3))
        S = A @ A.T + 0.5 * np.eye(3)
        mu = rng.normal(size=3)
        g = marginalize_to_ground(Gaussians3(mu[None], S[None], np.ones(1), np.zeros((1, 0))))
        n3 = stats.multivariate_normal(mu, S)
        n2 = stats.multivariate_normal(g.means[0], g.covs[0])
        for _ in range(4):
            x, y = mu[:2] + rng.normal(size=2)
            val, _ = integrate.quad(lambda z: n3.pdf([x, y, z]), -np.inf, np.inf, epsabs=1e-12)
            assert abs(val - n2.pdf([x, y])) <= 1e-3 * n2.pdf([x, y])


def test_empty_and_zero_weight():
    r = splat_forward(Gaussians2.concat([], 3), SPEC)
    assert not r.features.any() and not r.mass.any()
    r = splat_forward(one((0, 0), np.eye(2), w=0.0), SPEC)
    assert not r.mass.any()


def test_linearity_exact():
    a = one((1.0, -2.0), [[1.0, 0.3], [0.3, 0.5]], 0.7, (1, 2, 3))
    b = one((1.5, -1.0), [[0.4, -0.1], [-0.1, 0.9]], 1.3, (0, -1, 4))
    ra, rb = splat_forward(a, SPEC), splat_forward(b, SPEC)
    rab = splat_forward(Gaussians2.concat([a, b]), SPEC)
    assert np.array_equal(rab.mass, ra.mass + rb.mass)
    assert np.array_equal(rab.features, ra.features + rb.features)
    rr = splat_forward(Gaussians2.concat([a, a]), SPEC)
    assert np.array_equal(rr.mass, 2 * ra.mass) and np.array_equal(rr.features, 2 * ra.features)


def test_mass_isotropic_unit():
    r = splat_forward(one((0.1, -0.2), np.eye(2), 2.5), SPEC, trunc_sigma=6)
    assert abs(r.mass.sum() - 2.5) <= 0.01 * 2.5


def test_truncation_footprint():
    r = splat_forward(one((0.0, 0.0), np.eye(2) * 0.25), SPEC, trunc_sigma=3)
    x, y = SPEC.cell_centers()
    inside = (x ** 2 + y ** 2) / 0.25 <= 9
    assert np.array_equal(r.mass > 0, inside)


def test_oracle_untruncated(rng):
    g = random_gaussians(rng, 30, SPEC, margin=-3.0)
    r = splat_forward(g, SPEC, trunc_sigma=math.inf)
    ref = naive_splat(g, SPEC)
    assert np.max(rel_err(r.mass, ref.mass)) < 1e-12
    assert np.max(np.abs(r.features - ref.features)) <= 1e-12 * np.max(np.abs(ref.features))


def test_non_spd_rejected():
    with pytest.raises(DomainError):
        splat_forward(one((0, 0), [[1.0, 2.0], [2.0, 1.0]]), SPEC)
    with pytest.raises(DomainError):
        splat_forward(one((0, 0), [[1.0, 0.1], [0.0, 1.0]]), SPEC)
    with pytest.raises(DomainError):
        splat_forward(one((0, 0), np.eye(2)), SPEC, trunc_sigma=0)


def test_out_of_grid_silent():
    r = splat_forward(one((100.0, 0.0), np.eye(2)), SPEC)
    assert not r.mass.any()
    r = splat_forward(one((12.0, 0.0), np.eye(2)), SPEC, trunc_sigma=6)
    assert 0.4 < r.mass.sum() < 0.6


def test_normalize():
    g = Gaussians2.concat([one((0, 0), np.eye(2), 1.0, (2, 0, 0)), one((0.5, 0), np.eye(2), 3.0, (2, 0, 0))])
    r = splat_forward(g, SPEC, normalize=True)
    m = r.mass > 1e-6
    np.testing.assert_allclose(r.features[m][:, 0], 2.0, rtol=1e-12)


def test_normalize_backward_fd(rng):
    spec = BevGridSpec((-1.5, 1.5), (-1.5, 1.5), 0.375, 2)
    raw = BevRaster(spec, rng.normal(size=(8, 8, 2)), rng.uniform(0.1, 2, size=(8, 8)))
    up = rng.normal(size=(8, 8, 2))
    gf, gm = normalize_backward(raw, up)
    h = 1e-6

    def L(f, m):
        return np.sum(up * normalize_raster(BevRaster(spec, f, m)).features)

    for _ in range(10):
        i, j, c = rng.integers(8), rng.integers(8), rng.integers(2)
        f = raw.features.copy()
        f[i, j, c] += h
        lp = L(f, raw.mass)
        f[i, j, c] -= 2 * h
        assert (lp - L(f, raw.mass)) / (2 * h) == pytest.approx(gf[i, j, c], rel=1e-6)
        m = raw.mass.copy()
        m[i, j] += h
        lp = L(raw.features, m)
        m[i, j] -= 2 * h
        assert (lp - L(raw.features, m)) / (2 * h) == pytest.approx(gm[i, j], rel=1e-6)


def test_backward_zero_upstream(rng):
    g = random_gaussians(rng, 10, SPEC)
    sg = splat_backward(np.zeros(SPEC.shape + (3,)), np.zeros(SPEC.shape), g, SPEC)
    for arr in (sg.weights, sg.means, sg.covs, sg.features):
        assert not arr.any()


def test_backward_feature_is_contraction(rng):
    g = one((0.3, 0.2), [[0.8, 0.2], [0.2, 0.6]], 1.7, (0.5, -1.0, 2.0))
    up = rng.normal(size=SPEC.shape + (3,))
    sg = splat_backward(up, np.zeros(SPEC.shape), g, SPEC)
    contrib = splat_forward(g, SPEC).mass
    np.testing.assert_allclose(sg.features[0], np.einsum("rc,rck->k", contrib, up), rtol=1e-12)


def test_backward_fd_small():
    err = splat_gradcheck(seed=3, count=8)
    assert err["weights"] < 1e-4 and err["means"] < 1e-4 and err["features"] < 1e-4
    assert err["covs"] < 1e-3


def test_backward_shape_checks(rng):
    g = random_gaussians(rng, 3, SPEC)
    with pytest.raises(DomainError):
        splat_backward(np.zeros((2, 2, 3)), np.zeros(SPEC.shape), g, SPEC)


def test_deterministic_across_threads(rng):
    g = random_gaussians(rng, 3000, SPEC, margin=-2.0)
    ref = splat_forward(g, SPEC, threads=1)
    up = rng.normal(size=SPEC.shape + (3,))
    gref = splat_backward(up, ref.mass, g, SPEC, threads=1)
    for t in (2, 8):
        r = splat_forward(g, SPEC, threads=t)
        assert raster_bytes(r) == raster_bytes(ref)
        assert r.features.tobytes() == ref.features.tobytes()
        gg = splat_backward(up, ref.mass, g, SPEC, threads=t)
        assert gg.covs.tobytes() == gref.covs.tobytes() and gg.means.tobytes() == gref.means.tobytes()


def test_raster_round_trip(tmp_path, rng):
    r = splat_forward(random_gaussians(rng, 20, SPEC), SPEC)
    save_raster(r, tmp_path / "r.bevr")
    back = load_raster(tmp_path / "r.bevr")
    assert back.spec == SPEC
    np.testing.assert_array_equal(back.mass, r.mass.astype(np.float32))
    assert raster_bytes(back) == (tmp_path / "r.bevr").read_bytes()
    data = (tmp_path / "r.bevr").read_bytes()
    (tmp_path / "bad").write_bytes(b"BEVX" + data[4:])
    with pytest.raises(FormatError):
        load_raster(tmp_path / "bad")
    (tmp_path / "short").write_bytes(data[:-3])
    with pytest.raises(FormatError):
        load_raster(tmp_path / "short")


def test_resample():
    r = splat_forward(one((0, 0), np.eye(2), 1.0, (1, 2, 3)), SPEC)
    up = resample_raster(r, 180, 240, "nearest")
    assert up.mass.shape == (180, 240) and up.spec.resolution == pytest.approx(0.1)
    assert up.mass.max() == r.mass.max()
    bl = resample_raster(r, 180, 240, "bilinear")
    assert bl.features.shape == (180, 240, 3)
    same = resample_raster(r, 48, 64, "bilinear")
    np.testing.assert_allclose(same.mass, r.mass, atol=1e-15)
    with pytest.raises(DomainError):
        resample_raster(r, 100, 240)
    with pytest.raises(ValueError):
        resample_raster(r, 180, 240, "cubic")


@settings(max_examples=40, deadline=None)
@given(l1=st.floats(0.5625, 4.0), l2=st.floats(0.5625, 4.0), ang=st.floats(0, math.pi),
       w=st.floats(0.01, 10.0), cx=st.floats(-1, 1), cy=st.floats(-1, 1))
def test_mass_conservation_property(l1, l2, ang, w, cx, cy):
    c, s = math.cos(ang), math.sin(ang)
    R = np.array([[c, -s], [s, c]])
    cov = R @ np.diag([l1, l2]) @ R.T
    cov = 0.5 * (cov + cov.T)
    r = splat_forward(one((cx, cy), cov, w), SPEC, trunc_sigma=6)
    assert 0.99 * w <= r.mass.sum() <= 1.01 * w
