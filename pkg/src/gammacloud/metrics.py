"""Geometry and color distortion metrics.

MSE follows the MPEG pc_error convention: the per-direction mean squared
nearest-neighbour error is computed both ways and the larger one is kept.
PSNR is ``10 log10(k * peak^2 / MSE)`` with k = 3 by default.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .pointcloud import PointCloud

PSNR_CAP = 999.0


def _pos(x) -> np.ndarray:
    arr = x.positions if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or len(arr) == 0:
        raise ValueError("empty cloud")
    return arr


def default_peak(reference) -> float:
    ref = _pos(reference)
    return float((ref.max(axis=0) - ref.min(axis=0)).max())


def _nn(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return cKDTree(dst).query(src, k=1)[1]


def directed_p2p(a, b) -> float:
    """Mean squared distance from each point of ``a`` to its nearest in ``b``."""
    a, b = _pos(a), _pos(b)
    d = a - b[_nn(a, b)]
    return float(np.mean(np.sum(d * d, axis=1)))


def directed_p2plane(a, b, normals_b) -> float:
    a, b = _pos(a), _pos(b)
    idx = _nn(a, b)
    proj = np.sum((a - b[idx]) * np.asarray(normals_b)[idx], axis=1)
    return float(np.mean(proj * proj))


def psnr_from_mse(mse: float, peak: float, factor3: bool = True) -> float:
    if peak <= 0:
        raise ValueError("peak must be positive")
    if mse <= 0.0:
        return math.inf
    num = (3.0 if factor3 else 1.0) * peak * peak
    return 10.0 * math.log10(num / mse)


def p2p_psnr(a, b, peak: float | None = None, factor3: bool = True) -> float:
    """Point-to-point PSNR (M1). ``peak`` defaults to the bbox extent of ``b``."""
    peak = default_peak(b) if peak is None else peak
    mse = max(directed_p2p(a, b), directed_p2p(b, a))
    return psnr_from_mse(mse, peak, factor3)


def p2plane_psnr(a, b, normals_b, normals_a=None, peak: float | None = None,
                 factor3: bool = True, k: int = 16) -> float:
    """Point-to-plane PSNR (M2).

    Errors are projected on the normal of the matched reference point. The
    reverse direction needs normals of ``a``; they are estimated when absent.
    """
    if normals_b is None:
        raise ValueError("p2plane_psnr requires reference normals")
    peak = default_peak(b) if peak is None else peak
    if normals_a is None:
        normals_a = estimate_normals(a, k)
    mse = max(directed_p2plane(a, b, normals_b), directed_p2plane(b, a, normals_a))
    return psnr_from_mse(mse, peak, factor3)


def chamfer(a, b) -> float:
    return directed_p2p(a, b) + directed_p2p(b, a)


def estimate_normals(cloud, k: int = 16) -> np.ndarray:
    """Unit PCA normals over k nearest neighbours, oriented away from the centroid.

    When the outward direction is ambiguous (normal orthogonal to the offset
    from the centroid) the largest-magnitude component is made positive.
    """
    pos = _pos(cloud)
    k = min(k, len(pos))
    _, idx = cKDTree(pos).query(pos, k=k)
    if k == 1:
        idx = idx[:, None]
    nb = pos[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    n = vecs[:, :, 0]
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return orient_normals(pos, n)


def orient_normals(pos: np.ndarray, n: np.ndarray) -> np.ndarray:
    out = pos - pos.mean(axis=0)
    dot = np.sum(n * out, axis=1)
    scale = np.linalg.norm(out, axis=1) + 1e-300
    ambiguous = np.abs(dot) <= 1e-9 * scale
    big = n[np.arange(len(n)), np.argmax(np.abs(n), axis=1)]
    sign = np.where(ambiguous, np.sign(big), np.sign(dot))
    sign[sign == 0] = 1.0
    return n * sign[:, None]


def color_psnr(a: PointCloud, b: PointCloud) -> float:
    """RGB PSNR (peak 1.0) over nearest-neighbour matches, symmetric max."""
    if a.colors is None or b.colors is None:
        raise ValueError("color_psnr needs colored clouds")

    def one(x, y):
        d = x.colors - y.colors[_nn(x.positions, y.positions)]
        return float(np.mean(d * d))

    mse = max(one(a, b), one(b, a))
    return math.inf if mse <= 0 else 10.0 * math.log10(1.0 / mse)


@dataclass
class MetricReport:
    m1_db: float
    m2_db: float | None
    chamfer: float
    color_psnr_db: float | None = None
    peak_used: float = 1.0
    directionality: str = "symmetric"

    def to_json(self) -> dict:
        d = asdict(self)
        for key in ("m1_db", "m2_db", "color_psnr_db"):
            if d[key] is not None and math.isinf(d[key]):
                d[key] = PSNR_CAP
        return d


def evaluate(recon: PointCloud, reference: PointCloud, reference_normals=None,
             peak: float | None = None, k: int = 16) -> MetricReport:
    peak = default_peak(reference) if peak is None else peak
    normals_ref = estimate_normals(reference, k) if reference_normals is None else reference_normals
    m1 = p2p_psnr(recon, reference, peak)
    m2 = p2plane_psnr(recon, reference, normals_ref, peak=peak, k=k)
    col = None
    if recon.colors is not None and reference.colors is not None:
        col = color_psnr(recon, reference)
    return MetricReport(m1, m2, chamfer(recon, reference), col, peak)


CSV_COLUMNS = ("dataset", "victim_level", "method", "seed", "m1_db", "m2_db", "chamfer", "color_psnr_db")


def _cell(v):
    if isinstance(v, float):
        if math.isinf(v):
            return repr(PSNR_CAP)
        return repr(v)
    return "" if v is None else str(v)


def write_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in CSV_COLUMNS])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for key in ("m1_db", "m2_db", "chamfer", "color_psnr_db"):
            r[key] = float(r[key]) if r.get(key) not in (None, "") else None
        r["seed"] = int(r["seed"])
    return rows


def write_json(report: MetricReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
