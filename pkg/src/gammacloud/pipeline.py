"""Two-stage attacker training, the reconstruction attack and its ablations.

Stage 1 fits the latent point generator (LPG) and reconstruction decoder (RD)
on attacker clouds paired with their victim latents. Stage 2 freezes both and
fits the shape-latent denoiser (SLDM, Gaussian noise) and the latent-point
denoiser (LPGDM, Gamma noise, Gaussian in ablation ``B``).

The attack maps an intercepted latent through
SLDM partial diffusion -> LPG generation -> LPGDM partial diffusion -> RD ->
refinement. Ablation ``A`` keeps only LPG and RD; ``C`` drops refinement.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as tn
from .codec import TrainingDiverged, VictimDecoder, CodecConfig, chamfer_loss, stack_features
from .diffusion import (MODES, PROCESSES, NoiseSchedule, gamma_forward, gaussian_forward, lpgdm_loss,
                        make_schedule, partial_diffuse_denoise, sldm_loss)
from .networks import LatentConfig, LPGDMNet, LPGNet, RDNet, SLDMConfig, SLDMNet, gaussian_kl, lpg_sample
from .pointcloud import PointCloud
from .refine import RefineConfig, refine
from .rng import RngStream
from .tensor import ParamStore, Tensor

ABLATIONS = ("full", "A", "B", "C")


@dataclass
class AttackConfig:
    T_SL: int = 100
    T_LPG: int = 100
    t_attack_SL: int | None = None
    t_attack_LP: int = 5
    lambda_z: float = 1e-2
    lambda_h: float = 1e-2
    gen_weight: float = 1.0
    lr_vae: float = 1e-3
    lr_sldm: float = 1e-4
    lr_lpgdm: float = 1e-4
    dz: int = 128
    dh: int = 4
    n: int = 2048
    c: int = 0
    width: float = 1.0 / 8
    theta0: float = 1.0
    beta_min: float | None = None
    beta_max: float | None = None
    mode: str = "ancestral"
    steps_stage1: int = 400
    steps_sldm: int = 2000
    steps_lpgdm: int = 300
    batch_stage1: int = 2
    batch_sldm: int = 32
    batch_lpgdm: int = 2
    steps_supervised: int = 1500
    batch_supervised: int = 8
    lr_supervised: float = 1e-3
    lpg_sample: bool = False
    refine_n_max: int = 100_000
    refine_delta_max: float = 70.0
    seed: int = 0
    ablation: str = "full"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.t_attack_SL is None:
            self.t_attack_SL = self.T_SL // 4
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("lambda_z", "lambda_h", "gen_weight", "t_attack_SL", "t_attack_LP", "c", "seed"):
                if isinstance(v, (int, float)) and v < 0:
                    raise ValueError(f"{f.name} must be non-negative")
            elif isinstance(v, (int, float)) and not isinstance(v, bool) and v <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.t_attack_SL > self.T_SL or self.t_attack_LP > self.T_LPG:
            raise ValueError("t_attack exceeds the schedule length")

    def latent_config(self) -> LatentConfig:
        return LatentConfig(dz=self.dz, dh=self.dh, c=self.c, n=self.n, width=self.width)

    def sldm_config(self) -> SLDMConfig:
        return SLDMConfig(dz=self.dz, width=self.width)

    def _schedule(self, T: int, theta0: float) -> NoiseSchedule:
        # the default linear range is kept for short chains, so early steps stay gentle
        if (self.beta_min is None) != (self.beta_max is None):
            raise ValueError("set both beta_min and beta_max or neither")
        return make_schedule(T, self.beta_min or 1e-4, self.beta_max or 0.02, theta0)

    def schedule_sl(self) -> NoiseSchedule:
        return self._schedule(self.T_SL, 1.0)

    def schedule_lp(self) -> NoiseSchedule:
        return self._schedule(self.T_LPG, self.theta0)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainingReport:
    seed: int
    losses: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def log(self, key: str, value: float) -> None:
        self.losses.setdefault(key, []).append(float(value))

    def last(self, key: str, k: int = 20) -> float:
        return float(np.mean(self.losses[key][-k:]))

    def to_json(self) -> dict:
        for key, vals in self.losses.items():
            if not np.all(np.isfinite(vals)):
                raise ValueError(f"non-finite values in report series {key!r}")
        return {"seed": self.seed, "wall_time": self.wall_time, "losses": self.losses}


@dataclass
class LatentStats:
    """Per-dimension standardization of victim latents on the attacker side."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, z: np.ndarray) -> "LatentStats":
        z = np.asarray(z, dtype=np.float64)
        std = z.std(axis=0)
        return cls(z.mean(axis=0), np.maximum(std, 1e-6 * max(float(std.max()), 1e-12)))

    def normalize(self, z):
        return (np.asarray(z) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z) * self.std + self.mean


@dataclass
class AttackerModels:
    cfg: AttackConfig
    stats: LatentStats
    vae_store: ParamStore
    lpg: LPGNet
    rd: RDNet
    sldm: SLDMNet | None = None
    lpgdm: dict = field(default_factory=dict)  # noise process -> LPGDMNet

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.vae_store.save(d / "vae.gcpt")
        if self.sldm is not None:
            self.sldm.store.save(d / "sldm.gcpt")
        for process, net in sorted(self.lpgdm.items()):
            net.store.save(d / f"lpgdm_{process}.gcpt")
        meta = {"config": self.cfg.to_json(), "latent_config": asdict(self.cfg.latent_config()),
                "sldm_config": asdict(self.cfg.sldm_config()), "width": self.cfg.width,
                "stats": {"mean": self.stats.mean.tolist(), "std": self.stats.std.tolist()}}
        (d / "models.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "AttackerModels":
        d = Path(directory)
        meta_path = d / "models.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"missing checkpoint metadata {meta_path}")
        meta = json.loads(meta_path.read_text())
        cfg = config_from_json(meta["config"])
        stats = LatentStats(np.asarray(meta["stats"]["mean"]), np.asarray(meta["stats"]["std"]))
        models = build_vae(cfg, stats)
        models.vae_store.load(d / "vae.gcpt")
        if (d / "sldm.gcpt").exists():
            models.sldm = SLDMNet(cfg.sldm_config(), seed=cfg.seed)
            models.sldm.store.load(d / "sldm.gcpt")
        for process in PROCESSES:
            path = d / f"lpgdm_{process}.gcpt"
            if path.exists():
                net = LPGDMNet(cfg.latent_config(), seed=cfg.seed)
                net.store.load(path)
                models.lpgdm[process] = net
        return models


def config_from_json(d: dict) -> AttackConfig:
    known = {f.name for f in fields(AttackConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown attack config keys {sorted(unknown)}")
    return AttackConfig(**d)


def build_vae(cfg: AttackConfig, stats: LatentStats) -> AttackerModels:
    store = ParamStore()
    lc = cfg.latent_config()
    lpg = LPGNet(lc, seed=cfg.seed, store=store)
    rd = RDNet(lc, seed=cfg.seed + 1, store=store)
    return AttackerModels(cfg, stats, store, lpg, rd)


# ---------------------------------------------------------------- training helpers

def _guarded_step(store: ParamStore, lr: float, loss_fn, last_good: dict, what: str, step: int):
    """One optimizer step; restores ``last_good`` and raises on a non-finite loss."""
    store.zero_grad()
    try:
        loss, parts = loss_fn()
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"loss {value}")
        tn.backward(loss)
        grads_ok = all(np.isfinite(p.grad).all() for _, p in store.items())
        if not grads_ok:
            raise FloatingPointError("non-finite gradient")
    except FloatingPointError as exc:
        store.load_arrays(last_good)
        raise TrainingDiverged(f"{what} diverged at step {step}: {exc}; parameters restored to last good step") from exc
    tn.adam_step(store, lr)
    return value, parts


def _pairs(clouds: list[PointCloud], latents: np.ndarray, c: int) -> tuple[np.ndarray, np.ndarray]:
    if len(clouds) != len(latents) or not len(clouds):
        raise ValueError("need equally many (nonzero) clouds and latents")
    return stack_features(clouds, c), np.asarray(latents, dtype=np.float64)


def train_stage1(clouds: list[PointCloud], latents: np.ndarray, cfg: AttackConfig,
                 log=None) -> tuple[AttackerModels, TrainingReport]:
    """Fit LPG + RD on the variational bound plus a generation-path Chamfer term."""
    t0 = time.perf_counter()
    x_all, z_all = _pairs(clouds, latents, cfg.c)
    stats = LatentStats.fit(z_all)
    zn_all = stats.normalize(z_all)
    models = build_vae(cfg, stats)
    lpg, rd, store = models.lpg, models.rd, models.vae_store
    rng = RngStream(cfg.seed, 11)
    drop_rng = np.random.default_rng([cfg.seed, 12])
    report = TrainingReport(cfg.seed)

    for step in range(cfg.steps_stage1):
        idx = rng.generator.choice(len(x_all), size=min(cfg.batch_stage1, len(x_all)), replace=False)
        x, zn = x_all[idx], zn_all[idx]

        def loss_fn():
            emb, mu_z, lv_z = lpg.embed(zn, rng, sample=True)
            mu_h, lv_h = lpg.encode(x, emb, train=True, rng=drop_rng)
            h0 = lpg_sample(mu_h, lv_h, rng)
            x_rec = rd(h0, emb, train=True, rng=drop_rng)
            recon = tn.reduce_mean(tn.square(tn.sub(x_rec, Tensor(x))))
            kl_z = gaussian_kl(mu_z, lv_z)
            kl_h = gaussian_kl(mu_h, lv_h)
            gen = lpg.generate(emb, train=True, rng=drop_rng)
            gen_loss = chamfer_loss(gen, mu_h.data)
            loss = tn.add(tn.add(recon, tn.scale(kl_z, cfg.lambda_z)),
                          tn.add(tn.scale(kl_h, cfg.lambda_h), tn.scale(gen_loss, cfg.gen_weight)))
            return loss, {"recon": recon.item(), "kl_z": kl_z.item(), "kl_h": kl_h.item(),
                          "gen": gen_loss.item()}

        last_good = store.snapshot()
        value, parts = _guarded_step(store, cfg.lr_vae, loss_fn, last_good, "stage 1", step)
        report.log("elbo", value)
        for k, v in parts.items():
            report.log(k, v)
        if log is not None and step % 50 == 0:
            log(f"stage1 step {step} " + " ".join(f"{k}={v:.3e}" for k, v in parts.items()))
    report.wall_time = time.perf_counter() - t0
    return models, report


def encode_latent_points(models: AttackerModels, clouds: list[PointCloud], latents: np.ndarray,
                         chunk: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Posterior-mean latent points and shape-latent embeddings for training stage 2."""
    x_all, z_all = _pairs(clouds, latents, models.cfg.c)
    zn_all = models.stats.normalize(z_all)
    hs, embs = [], []
    with tn.no_grad():
        for i in range(0, len(x_all), chunk):
            emb, _, _ = models.lpg.embed(zn_all[i:i + chunk])
            mu, _ = models.lpg.encode(x_all[i:i + chunk], emb)
            hs.append(mu.data)
            embs.append(emb.data)
    return np.concatenate(hs), np.concatenate(embs)


def train_stage2(models: AttackerModels, clouds: list[PointCloud], latents: np.ndarray,
                 log=None) -> TrainingReport:
    """Fit SLDM and LPGDM with LPG/RD frozen (their parameters are never stepped).

    LPGDM uses Gamma noise, or Gaussian noise when the config selects ablation ``B``.
    """
    cfg = models.cfg
    t0 = time.perf_counter()
    report = TrainingReport(cfg.seed)
    train_sldm(models, latents, report, log)
    train_lpgdm(models, clouds, latents, "gaussian" if cfg.ablation == "B" else "gamma", report, log)
    report.wall_time = time.perf_counter() - t0
    return report


def train_sldm(models: AttackerModels, latents: np.ndarray, report: TrainingReport, log=None) -> SLDMNet:
    cfg = models.cfg
    zn_all = models.stats.normalize(np.asarray(latents, dtype=np.float64))
    sldm = SLDMNet(cfg.sldm_config(), seed=cfg.seed)
    s_sl = cfg.schedule_sl()
    rng = RngStream(cfg.seed, 21)
    drop_rng = np.random.default_rng([cfg.seed, 22])
    for step in range(cfg.steps_sldm):
        idx = rng.integers(0, len(zn_all), min(cfg.batch_sldm, len(zn_all)))
        t = rng.integers(1, s_sl.T + 1, len(idx))
        z_t, eps = gaussian_forward(s_sl, zn_all[idx], t, rng)

        def loss_fn():
            return sldm_loss(eps, sldm(z_t, t, train=True, rng=drop_rng)), {}

        value, _ = _guarded_step(sldm.store, cfg.lr_sldm, loss_fn, sldm.store.snapshot(), "SLDM", step)
        report.log("sldm", value)
        if log is not None and step % 200 == 0:
            log(f"sldm step {step} loss {value:.4f}")
    models.sldm = sldm
    return sldm


def train_lpgdm(models: AttackerModels, clouds: list[PointCloud], latents: np.ndarray, process: str,
                report: TrainingReport, log=None) -> LPGDMNet:
    if process not in PROCESSES:
        raise ValueError(f"unknown process {process!r}")
    cfg = models.cfg
    h_all, emb_all = encode_latent_points(models, clouds, latents)
    lpgdm = LPGDMNet(cfg.latent_config(), seed=cfg.seed)
    s_lp = cfg.schedule_lp()
    rng = RngStream(cfg.seed, 23)
    drop_rng = np.random.default_rng([cfg.seed, 24])
    key = f"lpgdm_{process}"
    for step in range(cfg.steps_lpgdm):
        idx = rng.integers(0, len(h_all), min(cfg.batch_lpgdm, len(h_all)))
        t = rng.integers(1, s_lp.T + 1, len(idx))
        if process == "gamma":
            h_t, noise = gamma_forward(s_lp, h_all[idx], t, rng)
        else:
            h_t, eps = gaussian_forward(s_lp, h_all[idx], t, rng)
            noise = eps * np.sqrt(1.0 - s_lp.alpha_bars[t]).reshape(-1, 1, 1)
        emb = emb_all[idx]

        def loss_fn():
            return lpgdm_loss(noise, lpgdm(h_t, emb, t, train=True, rng=drop_rng), t, s_lp), {}

        value, _ = _guarded_step(lpgdm.store, cfg.lr_lpgdm, loss_fn, lpgdm.store.snapshot(), key, step)
        report.log(key, value)
        if log is not None and step % 50 == 0:
            log(f"{key} step {step} loss {value:.4f}")
    models.lpgdm[process] = lpgdm
    return lpgdm


# ---------------------------------------------------------------- attack

def _sldm_predictor(net: SLDMNet):
    def predict(z, t):
        with tn.no_grad():
            return net(z, np.full(len(z), t)).data
    return predict


def _lpgdm_predictor(net: LPGDMNet, emb: np.ndarray):
    def predict(h, t):
        with tn.no_grad():
            return net(h, emb, np.full(len(h), t)).data
    return predict


@dataclass
class AttackResult:
    x_prime: PointCloud
    refined: PointCloud | None
    z_new: np.ndarray
    refine_log: list | None = None

    @property
    def output(self) -> PointCloud:
        return self.refined if self.refined is not None else self.x_prime


def attack(z0: np.ndarray, models: AttackerModels, ablation: str | None = None, seed: int | None = None,
           refine_cfg: RefineConfig | None = None) -> AttackResult:
    """Reconstruct a cloud from one intercepted latent."""
    cfg = models.cfg
    ablation = cfg.ablation if ablation is None else ablation
    if ablation not in ABLATIONS:
        raise ValueError(f"ablation must be one of {ABLATIONS}")
    process = "gaussian" if ablation == "B" else "gamma"
    if ablation != "A" and (models.sldm is None or process not in models.lpgdm):
        raise FileNotFoundError(f"diffusion checkpoints missing for ablation {ablation!r}; run stage 2 first")
    seed = cfg.seed if seed is None else seed
    rng = RngStream(seed, 31)
    zn = models.stats.normalize(np.asarray(z0, dtype=np.float64).reshape(1, -1))
    if zn.shape[1] != cfg.dz:
        raise ValueError(f"latent width {zn.shape[1]} != {cfg.dz}")
    if ablation != "A":
        zn = partial_diffuse_denoise(cfg.schedule_sl(), zn, cfg.t_attack_SL, _sldm_predictor(models.sldm),
                                     rng, "gaussian", cfg.mode)
    with tn.no_grad():
        emb = models.lpg.embed(zn)[0].data
        h0 = models.lpg.generate(emb, sample=cfg.lpg_sample, sample_rng=rng).data
    if ablation != "A":
        predictor = _lpgdm_predictor(models.lpgdm[process], emb)
        h0 = partial_diffuse_denoise(cfg.schedule_lp(), h0, cfg.t_attack_LP, predictor, rng, process, cfg.mode)
    with tn.no_grad():
        x = models.rd(h0, emb).data[0]
    x_prime = PointCloud.from_features(x, cfg.c)
    refined, rlog = None, None
    if ablation in ("full", "B"):
        rc = refine_cfg or RefineConfig(n_max=cfg.refine_n_max, delta_max=cfg.refine_delta_max, seed=seed)
        out = refine(x_prime, rc, RngStream(seed, 32))
        refined, rlog = out.cloud, out.to_json()
    return AttackResult(x_prime, refined, models.stats.denormalize(zn)[0], rlog)


# ---------------------------------------------------------------- supervised baseline

class SupervisedDecoder:
    """Direct latent -> cloud regressor mirroring the victim encoder."""

    def __init__(self, cfg: AttackConfig, stats: LatentStats, widths=(256, 512)):
        self.cfg = cfg
        self.stats = stats
        self.codec_cfg = CodecConfig(dz=cfg.dz, n=cfg.n, c=cfg.c, dec_widths=tuple(widths), seed=cfg.seed)
        self.store = ParamStore()
        self.net = VictimDecoder(self.codec_cfg, self.store, seed=cfg.seed + 7, prefix="sup")

    def __call__(self, z0: np.ndarray) -> PointCloud:
        zn = self.stats.normalize(np.asarray(z0, dtype=np.float64).reshape(1, -1))
        with tn.no_grad():
            out = self.net(zn).data[0]
        return PointCloud.from_features(out, self.cfg.c)


def train_supervised_baseline(clouds: list[PointCloud], latents: np.ndarray, cfg: AttackConfig,
                              log=None) -> tuple[SupervisedDecoder, TrainingReport]:
    t0 = time.perf_counter()
    x_all, z_all = _pairs(clouds, latents, cfg.c)
    stats = LatentStats.fit(z_all)
    zn_all = stats.normalize(z_all)
    dec = SupervisedDecoder(cfg, stats)
    rng = np.random.default_rng([cfg.seed, 41])
    report = TrainingReport(cfg.seed)
    for step in range(cfg.steps_supervised):
        idx = rng.choice(len(x_all), size=min(cfg.batch_supervised, len(x_all)), replace=False)

        def loss_fn():
            return chamfer_loss(dec.net(zn_all[idx]), x_all[idx]), {}

        value, _ = _guarded_step(dec.store, cfg.lr_supervised, loss_fn, dec.store.snapshot(), "supervised", step)
        report.log("chamfer", value)
        if log is not None and step % 200 == 0:
            log(f"supervised step {step} chamfer {value:.3e}")
    report.wall_time = time.perf_counter() - t0
    return dec, report
