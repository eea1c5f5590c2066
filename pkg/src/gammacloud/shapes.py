"""Synthetic shape families standing in for captured volumetric-video frames.

Each family draws its parameters uniformly from per-family ranges, builds a
surface, samples it area-uniformly and normalizes the result into the unit
cube. Disjoint parameter ranges give an attacker/victim distribution shift.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pointcloud import Mesh, PointCloud, normalize

FAMILIES = ("sphere", "torus", "capsule", "superquadric", "figure")

DEFAULT_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "sphere": {"radius": (0.5, 1.0)},
    "torus": {"tube": (0.2, 0.45), "yaw": (0.0, 0.0)},
    "capsule": {"length": (0.5, 2.0), "yaw": (0.0, 0.0)},
    "superquadric": {"e1": (0.4, 1.6), "e2": (0.4, 1.6), "b": (0.6, 1.0), "c": (0.6, 1.4), "yaw": (0.0, 0.0)},
    "figure": {"head": (0.18, 0.26), "shoulders": (0.5, 0.8), "torso": (0.7, 1.0), "arms": (0.5, 0.9)},
}


@dataclass(frozen=True)
class ShapeFamily:
    family: str
    params: dict = field(default_factory=dict)
    n: int = 2048
    noise: float = 0.0
    color_mode: str = "none"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.color_mode not in ("none", "position", "band"):
            raise ValueError(f"unknown color mode {self.color_mode!r}")
        merged = dict(DEFAULT_RANGES[self.family])
        for k, v in dict(self.params).items():
            if k not in merged:
                raise ValueError(f"{self.family}: unknown parameter {k!r}")
            lo, hi = float(v[0]), float(v[1])
            if not lo <= hi:
                raise ValueError(f"{self.family}.{k}: empty parameter range [{lo}, {hi}]")
            merged[k] = (lo, hi)
        object.__setattr__(self, "params", merged)

    def to_json(self) -> dict:
        return {"family": self.family, "params": {k: list(v) for k, v in self.params.items()},
                "N": self.n, "noise": self.noise, "color_mode": self.color_mode}

    @classmethod
    def from_json(cls, d: dict) -> "ShapeFamily":
        return cls(d["family"], {k: tuple(v) for k, v in d.get("params", {}).items()},
                   int(d.get("N", 2048)), float(d.get("noise", 0.0)), d.get("color_mode", "none"))


# ---------------------------------------------------------------- primitives

def _grid_faces(nu: int, nv: int, wrap_v: bool) -> np.ndarray:
    faces = []
    cols = nv if wrap_v else nv - 1
    for i in range(nu - 1):
        for j in range(cols):
            a = i * nv + j
            b = i * nv + (j + 1) % nv
            c = (i + 1) * nv + j
            d = (i + 1) * nv + (j + 1) % nv
            faces.append((a, b, d))
            faces.append((a, d, c))
    return np.array(faces, dtype=np.int64)


def _spow(x, e):
    return np.sign(x) * np.abs(x) ** e


def _rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def superquadric_mesh(a, b, c, e1, e2, nu=72, nv=144) -> Mesh:
    eta = np.linspace(-np.pi / 2, np.pi / 2, nu)
    om = np.linspace(-np.pi, np.pi, nv, endpoint=False)
    E, O = np.meshgrid(eta, om, indexing="ij")
    ce, se = _spow(np.cos(E), e1), _spow(np.sin(E), e1)
    v = np.stack([a * ce * _spow(np.cos(O), e2), b * ce * _spow(np.sin(O), e2), c * se], axis=-1)
    return Mesh(v.reshape(-1, 3), _grid_faces(nu, nv, True)).drop_degenerate()


def torus_mesh(R, r, nu=96, nv=48) -> Mesh:
    u = np.linspace(0, 2 * np.pi, nu + 1)
    v = np.linspace(0, 2 * np.pi, nv, endpoint=False)
    U, V = np.meshgrid(u, v, indexing="ij")
    pts = np.stack([(R + r * np.cos(V)) * np.cos(U), (R + r * np.cos(V)) * np.sin(U), r * np.sin(V)], axis=-1)
    return Mesh(pts.reshape(-1, 3), _grid_faces(nu + 1, nv, True)).drop_degenerate()


def capsule_mesh(radius, half_len, p0=None, axis=None, nu=64, nv=48) -> Mesh:
    """Surface of revolution: hemisphere, cylinder, hemisphere along ``axis``."""
    t1 = np.linspace(-np.pi / 2, 0.0, nu // 2)
    t2 = np.linspace(0.0, np.pi / 2, nu // 2)
    prof_r = radius * np.cos(np.concatenate([t1, t2]))
    prof_z = np.concatenate([radius * np.sin(t1) - half_len, radius * np.sin(t2) + half_len])
    phi = np.linspace(0, 2 * np.pi, nv, endpoint=False)
    R, P = np.meshgrid(prof_r, phi, indexing="ij")
    Z, _ = np.meshgrid(prof_z, phi, indexing="ij")
    local = np.stack([R * np.cos(P), R * np.sin(P), Z], axis=-1).reshape(-1, 3)
    if axis is not None:
        local = local @ _frame(np.asarray(axis, dtype=float)).T
    if p0 is not None:
        local = local + np.asarray(p0, dtype=float)
    return Mesh(local, _grid_faces(len(prof_r), nv, True)).drop_degenerate()


def _frame(axis: np.ndarray) -> np.ndarray:
    """Rotation whose third column is ``axis``."""
    z = axis / np.linalg.norm(axis)
    ref = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(ref, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _inside_ellipsoid(p, center, axes, margin=1e-6):
    q = (p - center) / axes
    return (q * q).sum(axis=1) < 1.0 - margin


def _inside_capsule(p, a, b, r, margin=1e-6):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    d = p - (a + t[:, None] * ab)
    return np.sqrt((d * d).sum(axis=1)) < r - margin


def _figure(params: dict, n: int, rng: np.random.Generator) -> np.ndarray:
    torso_h = params["torso"]
    torso = dict(center=np.array([0.0, 0.0, 0.0]), axes=np.array([0.32, 0.2, torso_h / 2]))
    head_r = params["head"]
    head_c = np.array([0.0, 0.0, torso_h / 2 + head_r * 0.9])
    sh = params["shoulders"] / 2
    arm_len = params["arms"]
    arm_r = 0.07
    sh_z = torso_h / 2 - 0.12
    arms = []
    for side in (-1.0, 1.0):
        a = np.array([side * (sh - 0.05), 0.0, sh_z])
        b = a + np.array([side * 0.35 * arm_len, 0.0, -0.94 * arm_len])
        arms.append((a, b))
    legs = []
    for side in (-1.0, 1.0):
        a = np.array([side * 0.14, 0.0, -torso_h / 2 + 0.1])
        b = a + np.array([0.0, 0.0, -0.8])
        legs.append((a, b))
    parts = [("ell", torso["center"], torso["axes"]), ("ell", head_c, np.full(3, head_r))]
    parts += [("cap", a, b, arm_r) for a, b in arms]
    parts += [("cap", a, b, 0.09) for a, b in legs]
    part_meshes = []
    for part in parts:
        if part[0] == "ell":
            m = superquadric_mesh(*part[2], 1.0, 1.0, nu=48, nv=96)
            part_meshes.append(Mesh(m.vertices + part[1], m.faces))
        else:
            _, a, b, r = part
            mid, ax = 0.5 * (a + b), b - a
            part_meshes.append(capsule_mesh(r, 0.5 * np.linalg.norm(ax), p0=mid, axis=ax, nu=24, nv=32))
    areas = np.array([m.face_areas().sum() for m in part_meshes])
    pts = []
    total = 4 * n
    for i, m in enumerate(part_meshes):
        cand = m.sample(max(int(total * areas[i] / areas.sum()), 16), rng)
        keep = np.ones(len(cand), dtype=bool)
        for j, other in enumerate(parts):
            if j == i:
                continue
            if other[0] == "ell":
                keep &= ~_inside_ellipsoid(cand, other[1], other[2])
            else:
                keep &= ~_inside_capsule(cand, other[1], other[2], other[3])
        pts.append(cand[keep])
    pts = np.concatenate(pts)
    return pts[rng.choice(len(pts), size=n, replace=False)]


def sample_params(spec: ShapeFamily, rng: np.random.Generator) -> dict:
    return {k: float(rng.uniform(lo, hi)) if hi > lo else lo for k, (lo, hi) in sorted(spec.params.items())}


def make_shape(family: str, params: dict, n: int, rng: np.random.Generator) -> np.ndarray:
    """Unnormalized (n, 3) surface samples for one parameter draw."""
    if family == "sphere":
        d = rng.standard_normal((n, 3))
        return params["radius"] * d / np.linalg.norm(d, axis=1, keepdims=True)
    if family == "torus":
        pts = torus_mesh(1.0, params["tube"]).sample(n, rng)
    elif family == "capsule":
        pts = capsule_mesh(0.5, 0.5 * params["length"]).sample(n, rng)
        pts = pts[:, [2, 0, 1]]
    elif family == "superquadric":
        pts = superquadric_mesh(1.0, params["b"], params["c"], params["e1"], params["e2"]).sample(n, rng)
    elif family == "figure":
        pts = _figure(params, n, rng)
    else:
        raise ValueError(f"unknown family {family!r}")
    if params.get("yaw", 0.0):
        pts = pts @ _rot_z(params["yaw"]).T
    return pts


def _colors(pos: np.ndarray, mode: str) -> np.ndarray | None:
    if mode == "none":
        return None
    if mode == "position":
        return 0.1 + 0.8 * pos
    band = 0.5 + 0.5 * np.sin(6.0 * np.pi * pos[:, 2:3])
    return np.concatenate([band, 0.3 + 0.4 * pos[:, :1], 1.0 - band], axis=1)


def gen_shapes(spec: ShapeFamily, count: int, seed: int) -> list[PointCloud]:
    """``count`` unit-cube normalized clouds, each deterministic in (seed, index)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = []
    for i in range(count):
        rng = np.random.default_rng([int(seed), i])
        params = sample_params(spec, rng)
        pts = make_shape(spec.family, params, spec.n, rng)
        if spec.noise > 0:
            pts = pts + spec.noise * rng.standard_normal(pts.shape)
        cloud, _ = normalize(PointCloud(pts))
        out.append(PointCloud(cloud.positions, _colors(cloud.positions, spec.color_mode)))
    return out


def chamfer_matrix(a: list[PointCloud], b: list[PointCloud]) -> np.ndarray:
    from .metrics import chamfer
    return np.array([[chamfer(x, y) for y in b] for x in a])


def write_manifest(path, spec: ShapeFamily, count: int, seed: int) -> None:
    d = spec.to_json()
    d.update(count=count, seed=seed)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True))


def read_manifest(path) -> tuple[ShapeFamily, int, int]:
    d = json.loads(Path(path).read_text())
    return ShapeFamily.from_json(d), int(d["count"]), int(d["seed"])
