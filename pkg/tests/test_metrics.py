import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from gammacloud import metrics as M
from gammacloud.pointcloud import PointCloud


# ---------------------------------------------------------------- brute-force oracles

def brute_directed(a, b, normals_b=None):
    total = 0.0
    for p in a:
        best, arg = math.inf, -1
        for j, q in enumerate(b):
            d = sum((p[i] - q[i]) ** 2 for i in range(3))
            if d < best:
                best, arg = d, j
        if normals_b is not None:
            best = sum((p[i] - b[arg][i]) * normals_b[arg][i] for i in range(3)) ** 2
        total += best
    return total / len(a)


def brute_psnr(mse, peak):
    return 10 * math.log10(3 * peak * peak / mse)


@pytest.mark.parametrize("seed", range(4))
def test_metrics_equal_brute_force(seed):
    rng = np.random.default_rng(seed)
    na, nb = rng.integers(20, 200, 2)
    a, b = rng.random((na, 3)), rng.random((nb, 3))
    na_, nb_ = M.estimate_normals(a), M.estimate_normals(b)
    peak = M.default_peak(b)
    eab, eba = brute_directed(a, b), brute_directed(b, a)
    assert M.chamfer(a, b) == pytest.approx(eab + eba, abs=1e-12)
    assert M.p2p_psnr(a, b) == pytest.approx(brute_psnr(max(eab, eba), peak), abs=1e-12)
    pab, pba = brute_directed(a, b, nb_), brute_directed(b, a, na_)
    got = M.p2plane_psnr(a, b, nb_, na_)
    assert got == pytest.approx(brute_psnr(max(pab, pba), peak), abs=1e-12)


def test_hand_computed_grid_case():
    g = np.arange(10) * 0.1
    a = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    b = a + np.array([0.01, 0, 0])
    assert M.p2p_psnr(a, b, peak=1.0) == pytest.approx(44.77121254719662, abs=1e-6)
    assert M.p2p_psnr(a, b, peak=1.0) == pytest.approx(10 * math.log10(3e4), abs=1e-9)
    assert M.p2p_psnr(a, b, peak=1.0, factor3=False) == pytest.approx(40.0, abs=1e-9)


def test_identical_clouds_sentinel():
    a = np.random.default_rng(0).random((30, 3))
    assert M.p2p_psnr(a, a) == math.inf
    rep = M.evaluate(PointCloud(a), PointCloud(a))
    assert rep.to_json()["m1_db"] == M.PSNR_CAP


def test_symmetry_and_errors():
    rng = np.random.default_rng(1)
    a, b = rng.random((40, 3)), rng.random((60, 3))
    assert M.p2p_psnr(a, b, peak=1.0) == M.p2p_psnr(b, a, peak=1.0)
    with pytest.raises(ValueError):
        M.p2p_psnr(np.zeros((0, 3)), a)
    with pytest.raises(ValueError):
        M.p2p_psnr(a, b, peak=0.0)
    with pytest.raises(ValueError):
        M.p2plane_psnr(a, b, None)
    with pytest.raises(ValueError):
        M.color_psnr(PointCloud(a), PointCloud(b))


def _plane(n=15):
    g = np.linspace(0, 1, n)
    xy = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    return np.concatenate([xy, np.zeros((len(xy), 1))], axis=1)


def test_in_plane_offset_is_invisible_to_m2():
    a = _plane()
    b = a + np.array([0.004, 0.003, 0.0])
    nz = np.tile([0.0, 0.0, 1.0], (len(a), 1))
    m1 = M.p2p_psnr(a, b, peak=1.0)
    m2 = M.p2plane_psnr(a, b, nz, nz, peak=1.0)
    assert m2 == math.inf and np.isfinite(m1)


def test_normal_offset_m2_equals_m1():
    a = _plane()
    b = a + np.array([0.0, 0.0, 0.01])
    nz = np.tile([0.0, 0.0, 1.0], (len(a), 1))
    assert M.p2plane_psnr(a, b, nz, nz, peak=1.0) == pytest.approx(M.p2p_psnr(a, b, peak=1.0), abs=1e-9)


def test_plane_normals_are_unit_plane_normal():
    a = _plane(8) @ Rotation.from_euler("xyz", [0.3, -0.2, 0.5]).as_matrix().T
    n = M.estimate_normals(a)
    true = Rotation.from_euler("xyz", [0.3, -0.2, 0.5]).as_matrix()[:, 2]
    np.testing.assert_allclose(np.abs(n @ true), 1.0, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-9)


def test_sphere_normals_point_outward():
    d = np.random.default_rng(2).standard_normal((500, 3))
    p = d / np.linalg.norm(d, axis=1, keepdims=True)
    n = M.estimate_normals(p)
    assert np.all(np.sum(n * p, axis=1) > 0.95)


def test_m2_at_least_m1_on_random_pairs():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        a, b = rng.random((rng.integers(3, 30), 3)), rng.random((rng.integers(3, 30), 3))
        nb = rng.standard_normal((len(b), 3))
        na = rng.standard_normal((len(a), 3))
        nb /= np.linalg.norm(nb, axis=1, keepdims=True)
        na /= np.linalg.norm(na, axis=1, keepdims=True)
        assert M.p2plane_psnr(a, b, nb, na, peak=1.0) >= M.p2p_psnr(a, b, peak=1.0) - 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_rigid_invariance(seed, tx, ty, tz):
    rng = np.random.default_rng(seed)
    a = rng.random((80, 3))
    b = a + 0.02 * rng.standard_normal(a.shape)
    R = Rotation.random(random_state=seed).as_matrix()
    t = np.array([tx, ty, tz])
    a2, b2 = a @ R.T + t, b @ R.T + t
    na, nb = M.estimate_normals(a), M.estimate_normals(b)
    assert M.chamfer(a2, b2) == pytest.approx(M.chamfer(a, b), abs=1e-9)
    assert M.p2p_psnr(a2, b2, peak=1.0) == pytest.approx(M.p2p_psnr(a, b, peak=1.0), abs=1e-9)
    m2 = M.p2plane_psnr(a, b, nb, na, peak=1.0)
    assert M.p2plane_psnr(a2, b2, nb @ R.T, na @ R.T, peak=1.0) == pytest.approx(m2, abs=1e-9)


def test_color_psnr():
    pos = np.random.default_rng(4).random((50, 3))
    col = np.full((50, 3), 0.5)
    assert M.color_psnr(PointCloud(pos, col), PointCloud(pos, col)) == math.inf
    assert M.color_psnr(PointCloud(pos, col), PointCloud(pos, col + 0.1)) == pytest.approx(20.0, abs=1e-9)


def test_csv_round_trip(tmp_path):
    rows = [{"dataset": "shifted", "victim_level": "high", "method": "optimal", "seed": 0, "m1_db": 33.5,
             "m2_db": math.inf, "chamfer": 1e-3, "color_psnr_db": None}]
    M.write_csv(rows, tmp_path / "r.csv")
    back = M.read_csv(tmp_path / "r.csv")
    assert back[0]["m1_db"] == 33.5 and back[0]["m2_db"] == M.PSNR_CAP and back[0]["color_psnr_db"] is None
    assert (tmp_path / "r.csv").read_text().splitlines()[0].split(",") == list(M.CSV_COLUMNS)
