import json

import numpy as np
import pytest

from gammacloud.metrics import chamfer
from gammacloud.shapes import FAMILIES, ShapeFamily, gen_shapes, make_shape, read_manifest, write_manifest


def fit_sphere(p):
    """Algebraic least-squares sphere: |p|^2 = 2 c.p + (r^2 - |c|^2)."""
    A = np.concatenate([2 * p, np.ones((len(p), 1))], axis=1)
    sol, *_ = np.linalg.lstsq(A, (p * p).sum(axis=1), rcond=None)
    c = sol[:3]
    return c, np.sqrt(sol[3] + c @ c)


def test_sphere_radius_exact():
    pts = make_shape("sphere", {"radius": 0.7}, 2048, np.random.default_rng(0))
    assert np.abs(np.linalg.norm(pts, axis=1) - 0.7).max() < 1e-12


def test_normalized_sphere_is_still_a_sphere():
    cloud = gen_shapes(ShapeFamily("sphere"), 1, seed=3)[0]
    c, r = fit_sphere(cloud.positions)
    assert np.abs(np.linalg.norm(cloud.positions - c, axis=1) - r).max() < 1e-12
    assert 0.49 < r < 0.51


@pytest.mark.parametrize("family", FAMILIES)
def test_count_size_and_unit_cube(family):
    clouds = gen_shapes(ShapeFamily(family, n=512), 2, seed=1)
    assert len(clouds) == 2
    for pc in clouds:
        assert len(pc) == 512
        lo, hi = pc.positions.min(axis=0), pc.positions.max(axis=0)
        assert lo.min() >= -1e-12 and hi.max() <= 1 + 1e-12
        assert (hi - lo).max() == pytest.approx(1.0, abs=1e-12)


def test_torus_in_unit_cube():
    pc = gen_shapes(ShapeFamily("torus", n=2048), 1, seed=0)[0]
    assert pc.positions.min() >= 0 and pc.positions.max() <= 1


def test_determinism_per_seed_and_index():
    spec = ShapeFamily("superquadric", n=256)
    a = gen_shapes(spec, 3, seed=7)
    b = gen_shapes(spec, 3, seed=7)
    for x, y in zip(a, b):
        assert x.positions.tobytes() == y.positions.tobytes()
    prefix = gen_shapes(spec, 1, seed=7)[0]
    assert prefix.positions.tobytes() == a[0].positions.tobytes()
    assert gen_shapes(spec, 1, seed=8)[0].positions.tobytes() != a[0].positions.tobytes()


def test_color_modes():
    pc = gen_shapes(ShapeFamily("capsule", n=128, color_mode="band"), 1, seed=0)[0]
    assert pc.c == 3 and pc.colors.min() >= 0 and pc.colors.max() <= 1
    assert gen_shapes(ShapeFamily("capsule", n=128), 1, seed=0)[0].colors is None


def test_errors():
    with pytest.raises(ValueError, match="empty parameter range"):
        ShapeFamily("sphere", {"radius": (1.0, 0.5)})
    with pytest.raises(ValueError):
        ShapeFamily("sphere", {"bogus": (0, 1)})
    with pytest.raises(ValueError):
        ShapeFamily("cube")
    with pytest.raises(ValueError):
        gen_shapes(ShapeFamily("sphere"), 0, seed=0)


def test_manifest_round_trip(tmp_path):
    spec = ShapeFamily("torus", {"tube": (0.25, 0.3)}, n=100, noise=0.01)
    write_manifest(tmp_path / "m.json", spec, 5, 11)
    d = json.loads((tmp_path / "m.json").read_text())
    assert {"family", "params", "N", "seed", "count"} <= set(d)
    back, count, seed = read_manifest(tmp_path / "m.json")
    assert back == spec and (count, seed) == (5, 11)


def test_disjoint_ranges_separate_families():
    victim = ShapeFamily("superquadric", {"e1": (0.3, 0.5), "e2": (0.3, 0.5)}, n=512)
    attacker = ShapeFamily("superquadric", {"e1": (1.4, 1.6), "e2": (1.4, 1.6)}, n=512)
    a = gen_shapes(victim, 5, seed=0)
    b = gen_shapes(attacker, 5, seed=1)
    intra = [chamfer(x, y) for grp in (a, b) for i, x in enumerate(grp) for y in grp[i + 1:]]
    inter = [chamfer(x, y) for x in a for y in b]
    assert max(intra) < min(inter)
