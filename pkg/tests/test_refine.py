import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation

from gammacloud import refine as R
from gammacloud.metrics import p2plane_psnr
from gammacloud.pointcloud import PointCloud
from gammacloud.rng import RngStream


def tilted_plane(n=20, seed=0):
    g = np.linspace(0, 1, n)
    xy = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    pts = np.concatenate([xy, np.zeros((len(xy), 1))], axis=1)
    rot = Rotation.from_euler("xyz", [0.4, -0.3, 0.2]).as_matrix()
    return pts @ rot.T + np.array([0.1, 0.2, 0.3]), rot[:, 2]


def sphere(n, seed=0, sigma=0.0, r=0.5):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * (r + sigma * rng.standard_normal((n, 1)))


def min_dist(p):
    return pdist(p).min() if len(p) > 1 else math.inf


# ---------------------------------------------------------------- surface model

def test_plane_projection_is_orthogonal_projection():
    pts, normal = tilted_plane()
    surf = R.fit_surface(PointCloud(pts))
    q = pts[::7] + np.random.default_rng(1).normal(0, 0.02, (len(pts[::7]), 3))
    out = surf.project(q)
    expect = q - ((q - pts[0]) @ normal)[:, None] * normal
    assert np.abs(out - expect).max() < 1e-9


def test_noisy_sphere_is_smoothed():
    noisy = sphere(2048, sigma=0.005)
    surf = R.fit_surface(PointCloud(noisy))
    rad_in = np.linalg.norm(noisy, axis=1)
    rad_out = np.linalg.norm(surf.project(noisy), axis=1)
    assert rad_out.std() < rad_in.std()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_projection_idempotent(seed):
    base = sphere(600, seed=seed, sigma=0.01)
    surf = R.fit_surface(PointCloud(base))
    rng = np.random.default_rng(seed)
    probes = base[rng.integers(0, len(base), 200)] + 0.02 * rng.standard_normal((200, 3))
    once = surf.project(probes)
    twice = surf.project(once)
    assert np.linalg.norm(twice - once, axis=1).max() < 1e-6 * surf.extent


def test_collinear_neighborhood_falls_back():
    line = np.stack([np.linspace(0, 1, 40), np.zeros(40), np.zeros(40)], 1)
    pts = np.concatenate([line, sphere(100, seed=3) + 3.0])
    surf = R.fit_surface(PointCloud(pts))
    n = surf.normals_at(line[20:21])
    assert surf.fallback_count > 0 and np.isfinite(n).all()


def test_fit_surface_needs_k_points():
    with pytest.raises(ValueError):
        R.fit_surface(PointCloud(np.zeros((5, 3))))


def test_colors_follow_nearest_reference():
    pts = sphere(200)
    cols = np.random.default_rng(0).random((200, 3))
    surf = R.fit_surface(PointCloud(pts, cols))
    np.testing.assert_array_equal(surf.colors_at(pts[:10]), cols[:10])


# ---------------------------------------------------------------- Poisson disk

@pytest.mark.parametrize("d", [0.05, 0.1, 0.2])
def test_pds_min_distance_brute_force(d):
    surf = R.fit_surface(PointCloud(sphere(1024, seed=2)))
    y = R.poisson_disk_sample(surf, d, RngStream(0))
    assert min_dist(y.positions) >= d


def test_pds_densifies_as_radius_halves():
    surf = R.fit_surface(PointCloud(sphere(1024, seed=4)))
    counts = [len(R.poisson_disk_sample(surf, d, RngStream(1))) for d in (0.2, 0.1, 0.05)]
    assert counts[0] < counts[1] < counts[2]


def test_unit_square_packing_bounds():
    pts, _ = tilted_plane(30)
    surf = R.fit_surface(PointCloud(pts))
    for seed in range(5):
        y = R.poisson_disk_sample(surf, 0.5, RngStream(seed))
        assert 1 <= len(y) <= 9


def test_pds_radius_beyond_extent_returns_a_point():
    surf = R.fit_surface(PointCloud(sphere(200)))
    assert len(R.poisson_disk_sample(surf, 10.0, RngStream(0))) >= 1
    with pytest.raises(ValueError):
        R.poisson_disk_sample(surf, 0.0, RngStream(0))


# ---------------------------------------------------------------- refinement loop

def test_config_validation():
    for kw in ({"n_max": 0}, {"delta_max": 0.0}, {"growth": 1.0}, {"growth": 0.0}, {"d0": -1.0},
               {"max_iters": 0}):
        with pytest.raises(ValueError):
            R.RefineConfig(**kw)


def test_radii_shrink_by_growth_factor_and_budget_holds():
    cfg = R.RefineConfig(n_max=3000, max_iters=6)
    out = R.refine(PointCloud(sphere(1024, seed=5)), cfg, RngStream(0))
    radii = [e["radius"] for e in out.log]
    np.testing.assert_allclose(np.diff(np.log(radii)), math.log(cfg.growth), rtol=1e-12)
    assert len(out.cloud) <= cfg.n_max
    assert min_dist(out.cloud.positions) >= out.radius


def test_budget_equal_to_first_count_exits_after_first_sample():
    x = PointCloud(sphere(512, seed=6))
    first = R.refine(x, R.RefineConfig(max_iters=1), RngStream(3))
    n0 = len(first.cloud)
    out = R.refine(x, R.RefineConfig(n_max=n0), RngStream(3))
    assert len(out.log) == 1 and out.stop_reason == "n_max" and len(out.cloud) == n0


def test_first_sample_over_budget_is_thinned():
    out = R.refine(PointCloud(sphere(512, seed=7)), R.RefineConfig(n_max=50), RngStream(0))
    assert len(out.cloud) == 50 and out.log[0]["thinned_to"] == 50


def test_low_threshold_converges_on_second_round():
    out = R.refine(PointCloud(sphere(512, seed=8)), R.RefineConfig(delta_max=1.0), RngStream(0))
    assert out.stop_reason == "converged" and len(out.log) == 2
    assert out.radius == out.log[0]["radius"]


def test_deterministic_given_stream():
    x = PointCloud(sphere(512, seed=9))
    a = R.refine(x, R.RefineConfig(n_max=2000), RngStream(4))
    b = R.refine(x, R.RefineConfig(n_max=2000), RngStream(4))
    assert a.cloud.positions.tobytes() == b.cloud.positions.tobytes() and a.log == b.log


def test_plane_refinement_stays_on_plane():
    pts, normal = tilted_plane(25)
    out = R.refine(PointCloud(pts), R.RefineConfig(n_max=1500), RngStream(0))
    assert np.abs((out.cloud.positions - pts[0]) @ normal).max() < 1e-9


def test_refined_noisy_sphere_beats_input_in_p2plane():
    noisy = sphere(2048, seed=10, sigma=0.005)
    gt = sphere(8192, seed=11)
    gt_n = gt / np.linalg.norm(gt, axis=1, keepdims=True)
    out = R.refine(PointCloud(noisy), R.RefineConfig(n_max=8192), RngStream(0))
    assert p2plane_psnr(out.cloud.positions, gt, gt_n) >= p2plane_psnr(noisy, gt, gt_n)


def test_terminates_within_caps_on_random_inputs():
    rng = np.random.default_rng(12)
    for i in range(100):
        n = int(rng.integers(16, 120))
        x = PointCloud(rng.random((n, 3)) * rng.uniform(0.1, 2.0))
        cfg = R.RefineConfig(n_max=int(rng.integers(20, 600)), max_iters=int(rng.integers(1, 6)))
        out = R.refine(x, cfg, RngStream(i))
        assert len(out.log) <= cfg.max_iters and 1 <= len(out.cloud) <= cfg.n_max
        assert min_dist(out.cloud.positions) >= out.radius
