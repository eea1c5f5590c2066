"""Point clouds, meshes, PLY interchange and spatial queries."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


class EmptyCloudError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    """N points with optional RGB colors in [0, 1]."""

    positions: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {pos.shape}")
        if len(pos) == 0:
            raise EmptyCloudError("empty cloud")
        if not np.isfinite(pos).all():
            raise ValueError("non-finite positions")
        object.__setattr__(self, "positions", pos)
        if self.colors is not None:
            col = np.clip(np.asarray(self.colors, dtype=np.float64), 0.0, 1.0)
            if col.shape != (len(pos), 3):
                raise ValueError(f"colors must be (N, 3), got {col.shape}")
            object.__setattr__(self, "colors", col)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def c(self) -> int:
        return 0 if self.colors is None else 3

    def features(self) -> np.ndarray:
        """(N, 3 + c) geometry followed by color channels."""
        if self.colors is None:
            return self.positions
        return np.concatenate([self.positions, self.colors], axis=1)

    @classmethod
    def from_features(cls, feats: np.ndarray, c: int = 0) -> "PointCloud":
        feats = np.asarray(feats)
        return cls(feats[:, :3], feats[:, 3:3 + c] if c else None)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.positions[idx], None if self.colors is None else self.colors[idx])


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f.reshape(-1, 3))

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def drop_degenerate(self, tol: float = 1e-14) -> "Mesh":
        return Mesh(self.vertices, self.faces[self.face_areas() > tol])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Area-uniform surface samples."""
        areas = self.face_areas()
        tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
        u, v = rng.random(n), rng.random(n)
        flip = u + v > 1
        u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
        a, b, c = (self.vertices[self.faces[tri, i]] for i in range(3))
        return a + u[:, None] * (b - a) + v[:, None] * (c - a)


# ---------------------------------------------------------------- normalization

@dataclass(frozen=True)
class Normalization:
    scale: float
    offset: np.ndarray
    degenerate: bool = False


def normalize(cloud: PointCloud) -> tuple[PointCloud, Normalization]:
    """Uniformly scale into the unit cube, bounding box centered at 0.5."""
    lo, hi = cloud.positions.min(axis=0), cloud.positions.max(axis=0)
    extent = float((hi - lo).max())
    degenerate = extent <= 1e-12
    if degenerate:
        warnings.warn("degenerate cloud (all points identical); using scale=1", RuntimeWarning)
        s = 1.0
    else:
        s = 1.0 / extent
    center = 0.5 * (lo + hi)
    offset = 0.5 - s * center
    return PointCloud(cloud.positions * s + offset, cloud.colors), Normalization(s, offset, degenerate)


def denormalize(cloud: PointCloud, norm: Normalization) -> PointCloud:
    return PointCloud((cloud.positions - norm.offset) / norm.scale, cloud.colors)


# ---------------------------------------------------------------- spatial queries

class KdIndex:
    """Exact nearest-neighbour index over a fixed point set."""

    def __init__(self, positions: np.ndarray):
        self.positions = np.asarray(positions, dtype=np.float64)
        self._tree = cKDTree(self.positions)

    def __len__(self) -> int:
        return len(self.positions)

    def nearest(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d, i = self._tree.query(np.asarray(q, dtype=np.float64), k=1)
        return d, i

    def knn(self, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        if k > len(self):
            raise ValueError(f"k={k} exceeds point count {len(self)}")
        q = np.asarray(q, dtype=np.float64)
        d, i = self._tree.query(q, k=k)
        if k == 1:
            d, i = d[..., None], i[..., None]
        return d, i

    def ball_query(self, centers: np.ndarray, radius: float, cap: int):
        """Up to ``cap`` nearest indices within ``radius`` per center.

        Missing slots repeat the first hit. A center with no hit gets its
        nearest point repeated and a count of 0.
        """
        if radius <= 0:
            raise ValueError("radius must be positive")
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        k = min(cap, len(self))
        d, idx = self._tree.query(centers, k=k)
        if k == 1:
            d, idx = d[:, None], idx[:, None]
        hit = d <= radius
        counts = hit.sum(axis=1)
        first = idx[:, :1]
        idx = np.where(hit, idx, first)
        if k < cap:
            idx = np.concatenate([idx, np.repeat(first, cap - k, axis=1)], axis=1)
        return idx, counts


def knn(index: KdIndex, q, k: int):
    return index.knn(q, k)


def ball_query(index: KdIndex, center, radius: float, cap: int):
    return index.ball_query(center, radius, cap)


def fps(positions: np.ndarray, m: int) -> np.ndarray:
    """Farthest point sampling starting at index 0.

    Accepts (N, 3) or batched (B, N, 3); returns (m,) or (B, m).
    """
    pos = np.asarray(positions, dtype=np.float64)
    batched = pos.ndim == 3
    if not batched:
        pos = pos[None]
    B, N, _ = pos.shape
    if m > N:
        raise ValueError(f"m={m} exceeds point count {N}")
    out = np.zeros((B, m), dtype=np.int64)
    dist = np.full((B, N), np.inf)
    rows = np.arange(B)
    cur = np.zeros(B, dtype=np.int64)
    for j in range(m):
        out[:, j] = cur
        diff = pos - pos[rows, cur][:, None, :]
        np.minimum(dist, np.einsum("bnk,bnk->bn", diff, diff), out=dist)
        cur = dist.argmax(axis=1)
    return out if batched else out[0]


def three_nn_weights(fine: np.ndarray, coarse: np.ndarray, k: int = 3):
    """Inverse-distance interpolation indices and weights (rows sum to 1)."""
    k = min(k, len(coarse))
    d, idx = cKDTree(coarse).query(fine, k=k)
    if k == 1:
        d, idx = d[:, None], idx[:, None]
    w = 1.0 / np.maximum(d, 1e-10)
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
}


class PlyError(ValueError):
    pass


def save_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    """Write positions (float64 in binary mode, repr-exact in ascii) and uchar colors."""
    path = Path(path)
    n = len(cloud)
    pos_type = "double" if binary else "float"
    header = ["ply", "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {n}", f"property {pos_type} x", f"property {pos_type} y",
              f"property {pos_type} z"]
    if cloud.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        rgb = np.clip(np.floor(cloud.colors * 256.0), 0, 255).astype(np.uint8)
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
        if cloud.colors is not None:
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        rec = np.empty(n, dtype=fields)
        rec["x"], rec["y"], rec["z"] = cloud.positions.T
        if cloud.colors is not None:
            rec["red"], rec["green"], rec["blue"] = rgb.T
        path.write_bytes(head + rec.tobytes())
    else:
        lines = []
        for i in range(n):
            row = " ".join(repr(float(v)) for v in cloud.positions[i])
            if cloud.colors is not None:
                row += " " + " ".join(str(int(v)) for v in rgb[i])
            lines.append(row)
        path.write_bytes(head + ("\n".join(lines) + "\n").encode("ascii"))


def load_ply(path) -> PointCloud:
    blob = Path(path).read_bytes()
    end = blob.find(b"end_header")
    if not blob.startswith(b"ply") or end < 0:
        raise PlyError("malformed header")
    nl = blob.find(b"\n", end)
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    body = blob[nl + 1:]
    fmt, n_vertex, props, in_vertex = None, None, [], False
    elements_before = []  # (count, props) of elements preceding vertex (ascii skip)
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
            elif n_vertex is None:
                elements_before.append(int(tok[2]))
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise PlyError("list properties on vertex are unsupported")
            if tok[1] not in _PLY_TYPES:
                raise PlyError(f"unsupported property type {tok[1]}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt is None or n_vertex is None:
        raise PlyError("malformed header")
    if elements_before:
        raise PlyError("vertex element must come first")
    if n_vertex == 0:
        raise EmptyCloudError("empty cloud")
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"missing property {axis}")
    if fmt == "ascii":
        rows = body.decode("ascii").split("\n")[:n_vertex]
        table = np.array([[float(v) for v in r.split()[:len(props)]] for r in rows])
        cols = {name: table[:, j] for j, name in enumerate(names)}
    elif fmt in ("binary_little_endian", "binary_big_endian"):
        order = "<" if fmt == "binary_little_endian" else ">"
        dt = np.dtype([(nm, order + t) for nm, t in props])
        rec = np.frombuffer(body, dtype=dt, count=n_vertex)
        cols = {name: rec[name] for name in names}
    else:
        raise PlyError(f"unknown format {fmt}")
    pos = np.stack([np.asarray(cols[a], dtype=np.float64) for a in "xyz"], axis=1)
    colors = None
    if all(c in cols for c in ("red", "green", "blue")):
        rgb = np.stack([np.asarray(cols[c], dtype=np.float64) for c in ("red", "green", "blue")], axis=1)
        colors = (rgb + 0.5) / 256.0
    return PointCloud(pos, colors)
