"""JSON run configuration with environment and command-line overrides.

Precedence, lowest first: built-in defaults, the JSON file, ``GC_<SECTION>_<KEY>``
environment variables, ``--set section.key=value`` flags.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, fields
from pathlib import Path

from .codec import CodecConfig
from .experiment import GridConfig
from .pipeline import AttackConfig
from .refine import RefineConfig

SCHEMA_VERSION = 1

SECTIONS = ("data", "codec", "attack", "schedule", "refine", "eval", "run")

_DATA_KEYS = {"victim", "attacker", "n_victim_train", "n_attacker", "n_test", "seed"}
_SCHEDULE_KEYS = {"T", "theta0", "mode", "beta_min", "beta_max"}
_EVAL_KEYS = {"levels", "methods", "seeds", "dataset"}
_RUN_KEYS = {"root"}


class ConfigError(ValueError):
    pass


def defaults() -> dict:
    grid = GridConfig()
    return {
        "version": SCHEMA_VERSION,
        "data": {"victim": grid.victim, "attacker": grid.attacker, "n_victim_train": grid.n_victim_train,
                 "n_attacker": grid.n_attacker, "n_test": grid.n_test, "seed": 0},
        "codec": {},
        "attack": {},
        "schedule": {},
        "refine": {},
        "eval": {"levels": list(grid.levels), "methods": list(grid.methods), "seeds": list(grid.seeds),
                 "dataset": grid.dataset},
        "run": {"root": "runs"},
    }


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k in SECTIONS:
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in environ.items():
        if not name.startswith("GC_"):
            continue
        rest = name[3:].lower()
        section, _, key = rest.partition("_")
        if section not in SECTIONS or not key:
            continue
        # environment names are case-insensitive; recover the field's spelling
        key = {k.lower(): k for k in _section_keys(section)}.get(key, key)
        out.setdefault(section, {})[key] = _parse_value(raw)
    return out


def _section_keys(section: str) -> set:
    typed = {"codec": CodecConfig, "attack": AttackConfig, "refine": RefineConfig}
    if section in typed:
        return {f.name for f in fields(typed[section])}
    return {"data": _DATA_KEYS, "schedule": _SCHEDULE_KEYS, "eval": _EVAL_KEYS, "run": _RUN_KEYS}[section]


def flag_overrides(pairs: list[str] | None) -> dict:
    out: dict = {}
    for item in pairs or []:
        lhs, sep, raw = item.partition("=")
        section, dot, key = lhs.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        out.setdefault(section, {})[key] = _parse_value(raw)
    return out


def load_config(path=None, overrides: list[str] | None = None, environ=None) -> dict:
    cfg = defaults()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            cfg = _merge(cfg, json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    cfg = _merge(cfg, env_overrides(environ))
    cfg = _merge(cfg, flag_overrides(overrides))
    validate(cfg)
    return cfg


def _check_keys(section: str, given: dict, allowed: set) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")


def validate(cfg: dict) -> None:
    """Raise ConfigError on unknown sections/keys or values the typed configs reject."""
    if cfg.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {cfg.get('version')}")
    unknown = set(cfg) - set(SECTIONS) - {"version"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    for section in SECTIONS:
        if not isinstance(cfg.get(section, {}), dict):
            raise ConfigError(f"[{section}] must be an object")
    _check_keys("data", cfg["data"], _DATA_KEYS)
    _check_keys("schedule", cfg["schedule"], _SCHEDULE_KEYS)
    _check_keys("eval", cfg["eval"], _EVAL_KEYS)
    _check_keys("run", cfg["run"], _RUN_KEYS)
    _check_keys("codec", cfg["codec"], {f.name for f in fields(CodecConfig)} - {"seed"})
    _check_keys("attack", cfg["attack"], {f.name for f in fields(AttackConfig)} - {"seed"})
    _check_keys("refine", cfg["refine"], {f.name for f in fields(RefineConfig)})
    try:
        codec_config(cfg, 0)
        attack_config(cfg, 0)
        refine_config(cfg)
        grid = grid_config(cfg)
        grid.families()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    from .codec import LEVELS
    from .experiment import METHODS
    bad = [lv for lv in grid.levels if lv not in LEVELS] + [m for m in grid.methods if m not in METHODS]
    if bad:
        raise ConfigError(f"[eval] unknown levels/methods: {bad}")


def _tuplify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def codec_config(cfg: dict, seed: int) -> CodecConfig:
    n = cfg["attack"].get("n", 2048)
    return CodecConfig(**{"n": n, **_tuplify(cfg["codec"]), "seed": seed})


def attack_config(cfg: dict, seed: int) -> AttackConfig:
    """The attacker sees victim latents, so latent width and color channels come from the codec."""
    sched = cfg["schedule"]
    codec = codec_config(cfg, seed)
    for key in ("dz", "c"):
        if key in cfg["attack"] and cfg["attack"][key] != getattr(codec, key):
            raise ConfigError(f"[attack] {key}={cfg['attack'][key]} disagrees with [codec] {key}={getattr(codec, key)}")
    extra = {"dz": codec.dz, "c": codec.c}
    if "T" in sched:
        extra.update(T_SL=int(sched["T"]), T_LPG=int(sched["T"]))
    for key in ("theta0", "mode", "beta_min", "beta_max"):
        if key in sched:
            extra[key] = sched[key]
    return AttackConfig(**{**cfg["attack"], **extra, "seed": seed})


def refine_config(cfg: dict) -> RefineConfig:
    return RefineConfig(**cfg["refine"])


def grid_config(cfg: dict) -> GridConfig:
    d, e = cfg["data"], cfg["eval"]
    att = attack_config(cfg, 0)
    attack = {k: v for k, v in asdict(att).items() if k not in ("seed", "dz", "c", "n")}
    attack["n"] = att.n
    return GridConfig(victim=d["victim"], attacker=d["attacker"], n_victim_train=int(d["n_victim_train"]),
                      n_attacker=int(d["n_attacker"]), n_test=int(d["n_test"]), levels=tuple(e["levels"]),
                      methods=tuple(e["methods"]), seeds=tuple(int(s) for s in e["seeds"]),
                      codec=_tuplify(cfg["codec"]), attack=attack, refine=dict(cfg["refine"]),
                      dataset=e["dataset"])


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
