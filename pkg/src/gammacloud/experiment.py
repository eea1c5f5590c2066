"""Evaluation grid: victim codec, attacker training and scored reconstructions per seed.

One seed trains a victim codec on the victim family, encodes a disjoint
attacker family for attacker training, then attacks latents of held-out
victim clouds at every quantization level and scores each method against
the ground truth.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .codec import CodecConfig, decode_optimal, encode_batch, simulate_bitrate_noise, stack_features, train_victim
from .metrics import estimate_normals, p2p_psnr, p2plane_psnr, chamfer, color_psnr
from .pipeline import (AttackConfig, TrainingReport, attack, train_lpgdm, train_stage1, train_stage2,
                       train_supervised_baseline)
from .refine import RefineConfig
from .shapes import ShapeFamily, gen_shapes

METHODS = ("optimal", "supervised", "vvrec", "vvrec-A", "vvrec-B", "vvrec-C")
ABLATION_OF = {"vvrec": "full", "vvrec-A": "A", "vvrec-B": "B", "vvrec-C": "C"}


@dataclass
class GridConfig:
    victim: dict = field(default_factory=lambda: {"family": "superquadric", "params": {"e1": [0.3, 0.8],
                                                                                        "e2": [0.3, 0.8]}})
    attacker: dict = field(default_factory=lambda: {"family": "superquadric", "params": {"e1": [1.0, 1.6],
                                                                                          "e2": [1.0, 1.6]}})
    n_victim_train: int = 64
    n_attacker: int = 32
    n_test: int = 6
    levels: tuple = ("high", "mid", "low")
    methods: tuple = METHODS
    seeds: tuple = (0, 1, 2)
    codec: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)
    refine: dict = field(default_factory=dict)
    dataset: str = "shifted"

    def families(self) -> tuple[ShapeFamily, ShapeFamily]:
        n = self.attack.get("n", 2048)
        v = ShapeFamily.from_json({"N": n, **self.victim})
        a = ShapeFamily.from_json({"N": n, **self.attacker})
        return v, a

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SeedRun:
    rows: list
    reports: dict
    checkpoints: dict


def _score(recon, gt, gt_normals) -> dict:
    m1 = p2p_psnr(recon, gt)
    m2 = p2plane_psnr(recon, gt, gt_normals)
    col = color_psnr(recon, gt) if recon.colors is not None and gt.colors is not None else None
    return {"m1_db": m1, "m2_db": m2, "chamfer": chamfer(recon, gt), "color_psnr_db": col}


def run_seed(grid: GridConfig, seed: int, log=None) -> SeedRun:
    victim_fam, attacker_fam = grid.families()
    victim_train = gen_shapes(victim_fam, grid.n_victim_train, 1000 * seed + 1)
    attacker = gen_shapes(attacker_fam, grid.n_attacker, 1000 * seed + 2)
    test = gen_shapes(victim_fam, grid.n_test, 1000 * seed + 3)

    ccfg = CodecConfig(**{"n": victim_fam.n, **grid.codec, "seed": seed})
    codec, codec_report = train_victim(victim_train, ccfg, log)
    z_att = encode_batch(codec, stack_features(attacker, ccfg.c))
    z_test = encode_batch(codec, stack_features(test, ccfg.c))

    acfg = AttackConfig(**{**grid.attack, "seed": seed, "dz": ccfg.dz, "c": ccfg.c, "n": victim_fam.n})
    reports = {"codec": {"losses": {"chamfer": codec_report.losses}}}
    methods = set(grid.methods)
    models = sup = None
    if methods & {"vvrec", "vvrec-A", "vvrec-B", "vvrec-C"}:
        models, r1 = train_stage1(attacker, z_att, acfg, log)
        reports["stage1"] = r1.to_json()
        if methods & {"vvrec", "vvrec-B", "vvrec-C"}:
            r2 = train_stage2(models, attacker, z_att, log)
            if "vvrec-B" in methods:
                train_lpgdm(models, attacker, z_att, "gaussian", r2, log)
            reports["stage2"] = r2.to_json()
    if "supervised" in methods:
        sup, rs = train_supervised_baseline(attacker, z_att, acfg, log)
        reports["supervised"] = rs.to_json()

    rcfg = RefineConfig(**{"n_max": acfg.refine_n_max, "delta_max": acfg.refine_delta_max, **grid.refine})
    rows = []
    for level in grid.levels:
        for i, gt in enumerate(test):
            z = simulate_bitrate_noise(z_test[i], level, codec.latent_std)
            normals = estimate_normals(gt)
            cache = {}
            for method in grid.methods:
                if method == "optimal":
                    recon = decode_optimal(codec, z)
                elif method == "supervised":
                    recon = sup(z)
                else:
                    ab = ABLATION_OF[method]
                    key = "C" if ab in ("full", "C") else ab
                    if key not in cache:
                        cache[key] = attack(z, models, ab, seed=seed * 10007 + i,
                                            refine_cfg=replace(rcfg, seed=seed * 10007 + i))
                    res = cache[key]
                    if ab == "C":
                        recon = res.x_prime
                    elif ab == "full":
                        recon = res.refined if res.refined is not None else _refined(res, rcfg, seed, i)
                    else:
                        recon = res.output
                row = {"dataset": grid.dataset, "victim_level": level, "method": method, "seed": seed,
                       "cloud": i, **_score(recon, gt, normals)}
                rows.append(row)
            if log is not None:
                log(f"seed {seed} level {level} cloud {i}: " +
                    " ".join(f"{r['method']}={r['m1_db']:.2f}/{r['m2_db']:.2f}" for r in rows[-len(grid.methods):]))
    return SeedRun(rows, reports, {"codec": codec, "attacker": models, "supervised": sup})


def _refined(res, rcfg, seed, i):
    from .refine import refine
    from .rng import RngStream
    return refine(res.x_prime, replace(rcfg, seed=seed * 10007 + i), RngStream(seed * 10007 + i, 32)).cloud


def aggregate(rows: list[dict]) -> list[dict]:
    """Per (dataset, level, method, seed): mean over clouds."""
    groups: dict = {}
    for r in rows:
        key = (r["dataset"], r["victim_level"], r["method"], r["seed"])
        groups.setdefault(key, []).append(r)
    out = []
    for (ds, lvl, m, s), rs in sorted(groups.items()):
        row = {"dataset": ds, "victim_level": lvl, "method": m, "seed": s}
        for k in ("m1_db", "m2_db", "chamfer", "color_psnr_db"):
            vals = [r[k] for r in rs if r.get(k) is not None]
            row[k] = float(np.mean(vals)) if vals else None
        out.append(row)
    return out


def medians(rows: list[dict], metric: str) -> dict:
    """{(level, method): median over seeds of ``metric``} from aggregated rows."""
    acc: dict = {}
    for r in rows:
        if r.get(metric) is not None:
            acc.setdefault((r["victim_level"], r["method"]), []).append(r[metric])
    return {k: float(np.median(v)) for k, v in acc.items()}
