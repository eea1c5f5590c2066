"""Command-line entry point: ``python -m gammacloud <subcommand>``.

Every subcommand writes into ``<root>/<name>-<hash>/`` where the hash covers
the effective config, seed and the hashes of its inputs. An existing run
directory is never overwritten unless ``--force`` is given. Failures exit
nonzero with a JSON error object on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, attack_config, canonical, codec_config, grid_config, load_config, refine_config
from .metrics import CSV_COLUMNS, read_csv, write_csv

EXIT_USAGE = 2
EXIT_RUNTIME = 1
REPORT_SCHEMA = 1


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.kind = kind
        self.code = code


# ---------------------------------------------------------------- run directories

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _input_digest(d: Path) -> str:
    man = d / "run.json"
    if not man.exists():
        raise CliError("missing_input", f"{d} is not a run directory (no run.json)")
    return json.loads(man.read_text())["hash"]


def open_run(root, name: str, payload: dict, force: bool) -> tuple[Path, str]:
    digest = hashlib.sha256(canonical(payload).encode()).hexdigest()[:16]
    out = Path(root) / f"{name}-{digest}"
    if out.exists():
        if not force:
            raise CliError("path_collision", f"{out} exists; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True)
    return out, digest


def close_run(out: Path, digest: str, payload: dict) -> None:
    artifacts = {str(p.relative_to(out)): sha256_file(p) for p in sorted(out.rglob("*")) if p.is_file()}
    manifest = {"hash": digest, "payload": payload, "artifacts": artifacts, "version": __version__,
                "numpy": np.__version__, "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
    (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _require_dir(path, what: str) -> Path:
    if path is None:
        raise CliError("missing_input", f"--{what} is required", EXIT_USAGE)
    p = Path(path)
    if not p.is_dir():
        raise CliError("missing_input", f"{what} directory not found: {p}")
    return p


def _logger(quiet: bool):
    if quiet:
        return None
    return lambda msg: print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------- data helpers

def _save_clouds(clouds, directory: Path) -> None:
    from .pointcloud import save_ply
    directory.mkdir(parents=True)
    for i, c in enumerate(clouds):
        save_ply(c, directory / f"{i:04d}.ply")


def _load_clouds(directory: Path):
    from .pointcloud import load_ply
    files = sorted(directory.glob("*.ply"))
    if not files:
        raise CliError("missing_input", f"no PLY files under {directory}")
    return [load_ply(f) for f in files]


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args, cfg):
    from .shapes import ShapeFamily, gen_shapes, write_manifest
    seed = cfg["data"]["seed"] if args.seed is None else args.seed
    grid = grid_config(cfg)
    victim, attacker = grid.families()
    payload = {"command": "gen-data", "data": cfg["data"], "n": victim.n, "seed": seed}
    out, digest = open_run(args.root or cfg["run"]["root"], "data", payload, args.force)
    splits = {"victim_train": (victim, grid.n_victim_train, 1000 * seed + 1),
              "attacker": (attacker, grid.n_attacker, 1000 * seed + 2),
              "test": (victim, grid.n_test, 1000 * seed + 3)}
    for name, (fam, count, s) in splits.items():
        _save_clouds(gen_shapes(fam, count, s), out / name)
        write_manifest(out / f"{name}.json", fam, count, s)
    close_run(out, digest, payload)
    return out


def cmd_train_victim(args, cfg):
    from .codec import train_victim
    data = _require_dir(args.data, "data")
    seed = cfg["data"]["seed"] if args.seed is None else args.seed
    ccfg = codec_config(cfg, seed)
    payload = {"command": "train-victim", "codec": ccfg.to_json(), "data": _input_digest(data)}
    out, digest = open_run(args.root or cfg["run"]["root"], "victim", payload, args.force)
    codec, report = train_victim(_load_clouds(data / "victim_train"), ccfg, _logger(args.quiet))
    codec.save(out / "codec.gcpt")
    (out / "report.json").write_text(json.dumps({"losses": report.losses}, sort_keys=True))
    close_run(out, digest, payload)
    return out


def cmd_encode_dataset(args, cfg):
    from .codec import LEVELS, VictimCodec, ShapeLatentRecord, encode_batch, save_latents, simulate_bitrate_noise
    from .codec import stack_features
    data = _require_dir(args.data, "data")
    victim = _require_dir(args.victim, "victim")
    payload = {"command": "encode-dataset", "data": _input_digest(data), "victim": _input_digest(victim)}
    out, digest = open_run(args.root or cfg["run"]["root"], "latents", payload, args.force)
    codec = VictimCodec.load(victim / "codec.gcpt")
    for split in ("attacker", "test"):
        z = encode_batch(codec, stack_features(_load_clouds(data / split), codec.cfg.c))
        save_latents([ShapeLatentRecord(v, split, i) for i, v in enumerate(z)], out / f"{split}.gczl")
        if split == "test":
            for level in LEVELS:
                zq = [simulate_bitrate_noise(v, level, codec.latent_std) for v in z]
                save_latents([ShapeLatentRecord(v, split, i, level) for i, v in enumerate(zq)],
                             out / f"test_{level}.gczl")
    close_run(out, digest, payload)
    return out


def _latents(directory: Path, name: str) -> np.ndarray:
    from .codec import load_latents
    path = directory / f"{name}.gczl"
    if not path.exists():
        raise CliError("missing_input", f"missing latent file {path}")
    return np.stack([r.z0 for r in load_latents(path)])


def cmd_train_vae(args, cfg):
    from .pipeline import train_stage1
    data = _require_dir(args.data, "data")
    lat = _require_dir(args.latents, "latents")
    seed = cfg["data"]["seed"] if args.seed is None else args.seed
    acfg = attack_config(cfg, seed)
    payload = {"command": "train-vae", "attack": acfg.to_json(), "data": _input_digest(data),
               "latents": _input_digest(lat)}
    out, digest = open_run(args.root or cfg["run"]["root"], "vae", payload, args.force)
    models, report = train_stage1(_load_clouds(data / "attacker"), _latents(lat, "attacker"), acfg,
                                  _logger(args.quiet))
    models.save(out / "models")
    (out / "report.json").write_text(json.dumps(report.to_json(), sort_keys=True))
    close_run(out, digest, payload)
    return out


def cmd_train_diffusion(args, cfg):
    from .pipeline import AttackerModels, train_lpgdm, train_stage2
    data = _require_dir(args.data, "data")
    lat = _require_dir(args.latents, "latents")
    vae = _require_dir(args.vae, "vae")
    payload = {"command": "train-diffusion", "vae": _input_digest(vae), "data": _input_digest(data),
               "latents": _input_digest(lat), "both_processes": bool(args.both_processes)}
    out, digest = open_run(args.root or cfg["run"]["root"], "diffusion", payload, args.force)
    if not (vae / "models" / "models.json").exists():
        raise CliError("missing_checkpoint", f"no stage-1 checkpoint under {vae}")
    models = AttackerModels.load(vae / "models")
    clouds, z = _load_clouds(data / "attacker"), _latents(lat, "attacker")
    report = train_stage2(models, clouds, z, _logger(args.quiet))
    if args.both_processes:
        other = "gamma" if "gaussian" in models.lpgdm else "gaussian"
        train_lpgdm(models, clouds, z, other, report, _logger(args.quiet))
    models.save(out / "models")
    (out / "report.json").write_text(json.dumps(report.to_json(), sort_keys=True))
    close_run(out, digest, payload)
    return out


def cmd_attack(args, cfg):
    from .pipeline import AttackerModels, attack
    from .pointcloud import save_ply
    models_dir = _require_dir(args.models, "models")
    lat = _require_dir(args.latents, "latents")
    name = "test" if args.level is None else f"test_{args.level}"
    payload = {"command": "attack", "models": _input_digest(models_dir), "latents": _input_digest(lat),
               "split": name, "ablation": args.ablation, "refine": cfg["refine"]}
    out, digest = open_run(args.root or cfg["run"]["root"], "attack", payload, args.force)
    if not (models_dir / "models" / "models.json").exists():
        raise CliError("missing_checkpoint", f"no checkpoints under {models_dir}")
    models = AttackerModels.load(models_dir / "models")
    process = "gaussian" if args.ablation == "B" else "gamma"
    if args.ablation != "A" and (models.sldm is None or process not in models.lpgdm):
        raise CliError("missing_checkpoint", f"ablation {args.ablation!r} needs stage-2 checkpoints; "
                                             f"{models_dir} has none for the {process} process")
    seed = models.cfg.seed
    logs = {}
    rc = refine_config(cfg)
    for i, z in enumerate(_latents(lat, name)):
        s = seed * 10007 + i
        res = attack(z, models, args.ablation, seed=s, refine_cfg=replace(rc, seed=s))
        save_ply(res.output, out / f"{name}_{i:04d}.ply")
        logs[f"{i:04d}"] = res.refine_log
    (out / "attack.json").write_text(json.dumps({"ablation": args.ablation, "refine": logs}, sort_keys=True,
                                                default=_json_default))
    close_run(out, digest, payload)
    return out


def _json_default(o):
    if isinstance(o, float) and math.isinf(o):
        return None
    raise TypeError(type(o))


def cmd_eval(args, cfg):
    from .experiment import aggregate, run_seed
    grid = grid_config(cfg)
    if args.seeds:
        grid.seeds = tuple(args.seeds)
    if args.methods:
        grid.methods = tuple(args.methods)
    payload = {"command": "eval", "grid": grid.to_json()}
    out, digest = open_run(args.root or cfg["run"]["root"], "eval", payload, args.force)
    rows, reports = [], {}
    for seed in grid.seeds:
        run = run_seed(grid, seed, _logger(args.quiet))
        rows.extend(run.rows)
        reports[str(seed)] = run.reports
        if args.save_checkpoints:
            d = out / f"checkpoints_seed{seed}"
            d.mkdir(parents=True)
            run.checkpoints["codec"].save(d / "codec.gcpt")
            if run.checkpoints["attacker"] is not None:
                run.checkpoints["attacker"].save(d / "attacker")
    write_csv(aggregate(rows), out / "results.csv")
    write_csv(rows, out / "per_cloud.csv")
    (out / "reports.json").write_text(json.dumps(reports, sort_keys=True))
    close_run(out, digest, payload)
    return out


def cmd_refine(args, cfg):
    from .pointcloud import load_ply, save_ply
    from .refine import refine
    from .rng import RngStream
    src = Path(args.input)
    if not src.exists():
        raise CliError("missing_input", f"input cloud not found: {src}")
    dst = Path(args.output)
    if dst.exists() and not args.force:
        raise CliError("path_collision", f"{dst} exists; pass --force to overwrite")
    rc = refine_config(cfg)
    res = refine(load_ply(src), rc, RngStream(rc.seed))
    save_ply(res.cloud, dst)
    log_path = Path(args.log) if args.log else dst.with_suffix(".json")
    log_path.write_text(json.dumps(res.to_json(), indent=2, sort_keys=True, default=_json_default))
    return dst


def summarize(rows: list[dict]) -> dict:
    """Medians over seeds per (dataset, level, method) and deltas vs supervised / optimal."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["dataset"], r["victim_level"], r["method"]), []).append(r)
    med = {}
    for key, rs in groups.items():
        entry = {"seeds": sorted(r["seed"] for r in rs)}
        for m in ("m1_db", "m2_db", "chamfer"):
            vals = [r[m] for r in rs if r.get(m) is not None]
            entry[m] = float(np.median(vals)) if vals else None
        med[key] = entry
    out = []
    for (ds, lvl, method), entry in sorted(med.items()):
        row = {"dataset": ds, "victim_level": lvl, "method": method, **entry}
        for ref in ("supervised", "optimal"):
            other = med.get((ds, lvl, ref))
            for m in ("m1_db", "m2_db"):
                key = f"delta_{m}_vs_{ref}"
                if other is None or other[m] is None or entry[m] is None:
                    row[key] = None
                else:
                    row[key] = entry[m] - other[m]
        out.append(row)
    return {"schema": REPORT_SCHEMA, "rows": out}


def cmd_report(args, cfg):
    rows = []
    for d in args.runs:
        path = Path(d) / "results.csv" if Path(d).is_dir() else Path(d)
        if not path.exists():
            raise CliError("missing_input", f"no results.csv in {d}")
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        if tuple(header) != CSV_COLUMNS:
            raise CliError("schema_mismatch", f"{path}: columns {header} do not match {list(CSV_COLUMNS)}")
        rows.extend(read_csv(path))
    summary = summarize(rows)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise CliError("path_collision", f"{out} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out / "aggregated.csv")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    with open(out / "summary.dat", "w") as fh:
        fh.write("# dataset level method m1_db m2_db delta_m1_vs_supervised delta_m1_vs_optimal\n")
        for r in summary["rows"]:
            cells = [r["dataset"], r["victim_level"], r["method"], r["m1_db"], r["m2_db"],
                     r["delta_m1_db_vs_supervised"], r["delta_m1_db_vs_optimal"]]
            fh.write(" ".join("NaN" if c is None else (f"{c:.6f}" if isinstance(c, float) else str(c))
                              for c in cells) + "\n")
    return out


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-victim": cmd_train_victim,
    "encode-dataset": cmd_encode_dataset,
    "train-vae": cmd_train_vae,
    "train-diffusion": cmd_train_diffusion,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "refine": cmd_refine,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gammacloud", description="Latent diffusion reconstruction attack toolkit")
    p.add_argument("--check-config", metavar="PATH", help="validate a config file and exit")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--root", help="run directory root (default from config)")
        sp.add_argument("--force", action="store_true", help="overwrite an existing output")
        sp.add_argument("--quiet", action="store_true")
        return sp

    common(sub.add_parser("gen-data", help="generate victim/attacker/test clouds"))
    common(sub.add_parser("train-victim", help="train the stand-in codec")).add_argument("--data")
    sp = common(sub.add_parser("encode-dataset", help="encode attacker and test clouds"))
    sp.add_argument("--data")
    sp.add_argument("--victim")
    sp = common(sub.add_parser("train-vae", help="stage 1: LPG + RD"))
    sp.add_argument("--data")
    sp.add_argument("--latents")
    sp = common(sub.add_parser("train-diffusion", help="stage 2: SLDM + LPGDM"))
    sp.add_argument("--data")
    sp.add_argument("--latents")
    sp.add_argument("--vae")
    sp.add_argument("--both-processes", action="store_true", help="also train the other LPGDM noise process")
    sp = common(sub.add_parser("attack", help="reconstruct test clouds from latents"))
    sp.add_argument("--models")
    sp.add_argument("--latents")
    sp.add_argument("--level", choices=("high", "mid", "low"))
    sp.add_argument("--ablation", default="full", choices=("full", "A", "B", "C"))
    sp = common(sub.add_parser("eval", help="run the evaluation grid"))
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--methods", nargs="+")
    sp.add_argument("--save-checkpoints", action="store_true")
    sp = common(sub.add_parser("refine", help="refine one PLY cloud"))
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--log")
    sp = common(sub.add_parser("report", help="aggregate eval runs"))
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out", required=True)
    return p


def _fail(kind: str, message: str, code: int, command=None) -> int:
    print(json.dumps({"error": kind, "message": message, "command": command}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and _fail("usage", "invalid command line", EXIT_USAGE)
    if args.check_config:
        try:
            load_config(args.check_config)
        except ConfigError as exc:
            return _fail("config", str(exc), EXIT_USAGE, "check-config")
        print(json.dumps({"ok": True, "config": args.check_config}))
        return 0
    if not args.command:
        parser.print_help(sys.stderr)
        return _fail("usage", "no subcommand given", EXIT_USAGE)
    try:
        cfg = load_config(args.config, args.set)
        out = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_USAGE, args.command)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code, args.command)
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_RUNTIME, args.command)
    print(json.dumps({"ok": True, "command": args.command, "output": str(out)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
