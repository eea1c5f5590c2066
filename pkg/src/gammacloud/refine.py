"""Point cloud refinement by surface fitting and iterative Poisson-disk resampling.

The surface is a moving-least-squares (MLS) model: a query point is moved onto
the Gaussian-weighted least-squares plane of its k nearest reference points,
and the step repeats until the point stops moving. The refinement loop samples
the surface at a shrinking radius until two successive samplings agree to
within ``delta_max`` dB of point-to-plane PSNR or the point budget runs out.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .metrics import p2plane_psnr
from .pointcloud import PointCloud
from .rng import RngStream

MLS_ITERS = 30


def mean_spacing(pos: np.ndarray) -> float:
    d, _ = cKDTree(pos).query(pos, k=2)
    return float(d[:, 1].mean())


@dataclass
class SurfaceModel:
    """MLS projection surface over a reference cloud."""

    positions: np.ndarray
    colors: np.ndarray | None
    k: int = 16
    fallback_count: int = 0

    def __post_init__(self):
        self.tree = cKDTree(self.positions)
        self.extent = float(np.ptp(self.positions, axis=0).max()) or 1.0
        self.spacing = mean_spacing(self.positions) if len(self.positions) > 1 else self.extent

    def _plane(self, q: np.ndarray, k: int):
        """Weighted centroid, normal and planarity flag at each query."""
        k = min(k, len(self.positions))
        d, idx = self.tree.query(q, k=k)
        if k == 1:
            d, idx = d[:, None], idx[:, None]
        # Bandwidth is the local spacing seen from the query, and the weight
        # of the k-th neighbor is subtracted so that it enters and leaves the
        # neighborhood at zero weight. Both keep the fit continuous in q,
        # which the fixed-point iteration in ``project`` relies on.
        h = np.maximum(2.0 * d[:, :min(k, 6)].mean(axis=1, keepdims=True), 1e-9 * self.extent)
        w = np.exp(-(d / h) ** 2) - np.exp(-(d[:, -1:] / h) ** 2)
        w[:, 0] = np.maximum(w[:, 0], 1e-300)
        w /= w.sum(axis=1, keepdims=True)
        nb = self.positions[idx]
        c = np.einsum("nk,nki->ni", w, nb)
        x = nb - c[:, None, :]
        cov = np.matmul(np.swapaxes(x * w[:, :, None], 1, 2), x)
        vals, vecs = np.linalg.eigh(cov)
        collinear = vals[:, 1] <= 1e-12 * np.maximum(vals[:, 2], 1e-300)
        return c, vecs[:, :, 0], collinear

    def normals_at(self, q: np.ndarray) -> np.ndarray:
        _, n, _ = self._plane_robust(q)
        return n

    def _plane_robust(self, q: np.ndarray):
        c, n, bad = self._plane(q, self.k)
        k = self.k
        while bad.any() and k < len(self.positions):
            k = min(2 * k, len(self.positions))
            c2, n2, bad2 = self._plane(q[bad], k)
            self.fallback_count += int(bad.sum())
            sel = np.nonzero(bad)[0]
            c[sel], n[sel] = c2, n2
            bad = np.zeros(len(q), dtype=bool)
            bad[sel[bad2]] = True
        return c, n, bad

    def project(self, q: np.ndarray, return_normals: bool = False):
        """Move each query onto its local MLS plane, iterated to a fixed point."""
        p = np.array(q, dtype=np.float64, copy=True)
        tol = 1e-7 * self.extent
        active = np.arange(len(p))
        normals = np.zeros_like(p)
        for _ in range(MLS_ITERS):
            c, n, _ = self._plane_robust(p[active])
            new = p[active] - np.sum((p[active] - c) * n, axis=1, keepdims=True) * n
            moved = np.linalg.norm(new - p[active], axis=1)
            p[active] = new
            normals[active] = n
            active = active[moved > tol]
            if active.size == 0:
                break
        if return_normals:
            return p, normals
        return p

    def colors_at(self, q: np.ndarray) -> np.ndarray | None:
        if self.colors is None:
            return None
        return self.colors[self.tree.query(q)[1]]


def fit_surface(x_prime: PointCloud, k: int = 16) -> SurfaceModel:
    if len(x_prime) < k:
        raise ValueError(f"fit_surface needs at least k={k} points, got {len(x_prime)}")
    return SurfaceModel(x_prime.positions.copy(), None if x_prime.colors is None else x_prime.colors.copy(), k)


# ---------------------------------------------------------------- Poisson disk

def _dart_throw(cand: np.ndarray, d: float, chunk: int = 4096) -> np.ndarray:
    """Greedy order-preserving acceptance: a candidate is kept iff no earlier kept point lies within d."""
    kept: list[np.ndarray] = []
    kept_pos = np.empty((0, 3))
    for lo in range(0, len(cand), chunk):
        block = cand[lo:lo + chunk]
        if len(kept_pos):
            dist, _ = cKDTree(kept_pos).query(block, k=1, distance_upper_bound=d * (1 + 1e-12))
            block = block[~(dist <= d)]
        if not len(block):
            continue
        nbrs = cKDTree(block).query_ball_point(block, r=d)
        ok = np.ones(len(block), dtype=bool)
        for i in range(len(block)):
            if not ok[i]:
                continue
            for j in nbrs[i]:
                if j > i:
                    ok[j] = False
        kept.append(block[ok])
        kept_pos = np.concatenate([kept_pos, block[ok]])
    return kept_pos


def estimate_area(surface: SurfaceModel) -> float:
    k = min(surface.k, len(surface.positions))
    d, _ = surface.tree.query(surface.positions, k=k)
    rk = d[:, -1] if k > 1 else np.full(len(d), surface.spacing)
    return float(np.sum(math.pi * rk ** 2 / max(k, 1)))


def poisson_disk_sample(surface: SurfaceModel, d: float, rng: RngStream, pool_factor: float = 10.0,
                        max_pool: int = 400_000) -> PointCloud:
    """Dart throwing over jittered, surface-projected candidates; min pairwise distance >= d."""
    if d <= 0:
        raise ValueError("sampling radius must be positive")
    expected = max(1.0, estimate_area(surface) / (d * d))
    m = int(min(max_pool, max(64, pool_factor * expected)))
    base = surface.positions[rng.integers(0, len(surface.positions), m)]
    cand = base + 0.5 * surface.spacing * rng.normal((m, 3))
    cand = surface.project(cand)
    near, _ = surface.tree.query(cand)
    cand = cand[near <= surface.spacing]
    if not len(cand):
        cand = surface.positions[:1].copy()
    pts = _dart_throw(cand, d)
    return PointCloud(pts, surface.colors_at(pts))


# ---------------------------------------------------------------- refinement loop

@dataclass
class RefineConfig:
    n_max: int = 100_000
    delta_max: float = 70.0
    d0: float | None = None
    growth: float = 1.0 / math.sqrt(2.0)
    max_iters: int = 12
    k: int = 16
    pool_factor: float = 10.0
    max_pool: int = 400_000
    seed: int = 0

    def __post_init__(self):
        if self.n_max < 1 or self.delta_max <= 0 or self.max_iters < 1 or self.k < 3:
            raise ValueError("refine config values must be positive")
        if self.d0 is not None and self.d0 <= 0:
            raise ValueError("d0 must be positive")
        if not 0.0 < self.growth < 1.0:
            raise ValueError("growth factor must lie in (0, 1)")


@dataclass
class RefinedCloud:
    cloud: PointCloud
    radius: float
    log: list = field(default_factory=list)
    stop_reason: str = ""

    def to_json(self) -> dict:
        return {"points": len(self.cloud), "radius": self.radius, "stop_reason": self.stop_reason,
                "iterations": self.log}


def refine(x_prime: PointCloud, cfg: RefineConfig | None = None, rng: RngStream | None = None) -> RefinedCloud:
    """Sample the fitted surface at shrinking radius until successive samplings agree.

    Each round draws y at radius d. While PSNR(y, y_last) <= delta_max the
    samplings still differ, so y becomes y_last and d shrinks; otherwise the
    loop stops and y_last is returned. The first round always continues. A
    sample that would exceed ``n_max`` is discarded, unless it is the first
    one, which is then randomly thinned to ``n_max`` points.
    """
    cfg = cfg or RefineConfig()
    rng = rng or RngStream(cfg.seed)
    surface = fit_surface(x_prime, cfg.k)
    d = cfg.d0 if cfg.d0 is not None else 2.0 * surface.spacing
    y_last: PointCloud | None = None
    d_last = d
    log: list[dict] = []
    reason = "max_iters"
    for it in range(cfg.max_iters):
        y = poisson_disk_sample(surface, d, rng, cfg.pool_factor, cfg.max_pool)
        entry = {"iter": it, "radius": d, "points": len(y), "psnr_to_previous": None}
        if len(y) > cfg.n_max:
            entry["discarded"] = True
            log.append(entry)
            if y_last is None:
                keep = np.sort(rng.generator.choice(len(y), cfg.n_max, replace=False))
                y_last, d_last = y.subset(keep), d
                entry["thinned_to"] = cfg.n_max
            reason = "n_max"
            break
        if y_last is None:
            psnr = -math.inf
        else:
            normals = surface.normals_at(y_last.positions)
            psnr = p2plane_psnr(y.positions, y_last.positions, normals,
                                normals_a=surface.normals_at(y.positions), k=cfg.k)
            entry["psnr_to_previous"] = psnr
        log.append(entry)
        if psnr <= cfg.delta_max:
            y_last, d_last = y, d
            if len(y_last) >= cfg.n_max:
                reason = "n_max"
                break
            d *= cfg.growth
        else:
            reason = "converged"
            break
    return RefinedCloud(y_last, d_last, log, reason)
