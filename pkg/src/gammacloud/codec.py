"""Stand-in learned point cloud codec: a PointNet-style encoder and an MLP decoder.

The encoder is the public half (its latents are what an attacker intercepts);
the decoder is private and only used to score the "optimal" reconstruction.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as tn
from .networks import Dense, LEAKY
from .pointcloud import PointCloud
from .tensor import ParamStore, Tensor

LEVELS = {"high": 0.01, "mid": 0.05, "low": 0.1}
LATENT_MAGIC = b"GCZL"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class CodecConfig:
    dz: int = 128
    n: int = 2048
    c: int = 0
    enc_widths: tuple = (64, 128, 256)
    dec_widths: tuple = (256, 512)
    steps: int = 1500
    batch: int = 8
    lr: float = 1e-3
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)


class VictimEncoder:
    """Per-point MLP, max-pool over points, linear to the latent width."""

    def __init__(self, cfg: CodecConfig, store: ParamStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng([seed, 1])
        fin = 3 + cfg.c
        self.layers = []
        for i, w in enumerate(cfg.enc_widths):
            self.layers.append(Dense(self.store, f"enc.l{i}", fin, w, rng))
            fin = w
        self.out = Dense(self.store, "enc.out", fin, cfg.dz, rng)

    def __call__(self, feats):
        x = tn.as_tensor(feats)
        if x.ndim != 3 or x.shape[-1] != 3 + self.cfg.c:
            raise ValueError(f"encoder expects (B, N, {3 + self.cfg.c}), got {x.shape}")
        h = tn.add(x, Tensor(np.full((1, 1, x.shape[-1]), -0.5)))
        for layer in self.layers:
            h = tn.leaky_relu(layer(h), LEAKY)
        return self.out(tn.max_pool(h, axis=1))


class VictimDecoder:
    """Latent MLP emitting a fixed-size point set around the cube center."""

    def __init__(self, cfg: CodecConfig, store: ParamStore | None = None, seed: int = 0, prefix: str = "dec"):
        self.cfg = cfg
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng([seed, 2])
        fin = cfg.dz
        self.layers = []
        for i, w in enumerate(cfg.dec_widths):
            self.layers.append(Dense(self.store, f"{prefix}.l{i}", fin, w, rng))
            fin = w
        self.out = Dense(self.store, f"{prefix}.out", fin, cfg.n * (3 + cfg.c), rng, init_scale=0.3)

    def __call__(self, z):
        z = tn.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.cfg.dz:
            raise ValueError(f"decoder expects (B, {self.cfg.dz}), got {z.shape}")
        h = z
        for layer in self.layers:
            h = tn.leaky_relu(layer(h), LEAKY)
        out = tn.reshape(self.out(h), (z.shape[0], self.cfg.n, 3 + self.cfg.c))
        return tn.add(out, Tensor(np.full((1, 1, 1), 0.5)))


def chamfer_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Symmetric squared Chamfer over (B, N, D); matching uses the first 3 channels."""
    target = np.asarray(target)
    B = target.shape[0]
    fwd = np.empty(pred.shape[:2], dtype=np.int64)
    bwd = np.empty(target.shape[:2], dtype=np.int64)
    for b in range(B):
        fwd[b] = cKDTree(target[b, :, :3]).query(pred.data[b, :, :3])[1]
        bwd[b] = cKDTree(pred.data[b, :, :3]).query(target[b, :, :3])[1]
    matched = target[np.arange(B)[:, None], fwd]
    d1 = tn.sub(pred, Tensor(matched))
    d2 = tn.sub(tn.gather(pred, bwd), Tensor(target))
    per = lambda d: tn.scale(tn.reduce_sum(tn.square(d)), 1.0 / (d.shape[0] * d.shape[1]))
    return tn.add(per(d1), per(d2))


@dataclass
class CodecReport:
    losses: list = field(default_factory=list)
    latent_mean: list = field(default_factory=list)
    latent_std: list = field(default_factory=list)


class VictimCodec:
    """Encoder/decoder pair plus latent statistics used for bitrate simulation."""

    def __init__(self, cfg: CodecConfig):
        self.cfg = cfg
        self.store = ParamStore()
        self.encoder = VictimEncoder(cfg, self.store, cfg.seed)
        self.decoder = VictimDecoder(cfg, self.store, cfg.seed)
        self.latent_std = np.ones(cfg.dz)

    def save(self, path) -> None:
        self.store.save(path)
        Path(str(path) + ".json").write_text(json.dumps(
            {"config": self.cfg.to_json(), "latent_std": self.latent_std.tolist()}, indent=2))

    @classmethod
    def load(cls, path) -> "VictimCodec":
        meta = json.loads(Path(str(path) + ".json").read_text())
        cfg = meta["config"]
        cfg = CodecConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()})
        codec = cls(cfg)
        codec.store.load(path)
        codec.latent_std = np.asarray(meta["latent_std"])
        return codec


def stack_features(clouds: list[PointCloud], c: int) -> np.ndarray:
    feats = [cl.features() for cl in clouds]
    if any(f.shape[1] != 3 + c for f in feats):
        raise ValueError(f"clouds must have {3 + c} channels")
    return np.stack(feats)


def train_victim(dataset: list[PointCloud], cfg: CodecConfig, log=None) -> tuple[VictimCodec, CodecReport]:
    """Fit encoder and decoder jointly on Chamfer reconstruction."""
    if not dataset:
        raise ValueError("train_victim: empty dataset")
    codec = VictimCodec(cfg)
    feats = stack_features(dataset, cfg.c)
    rng = np.random.default_rng([cfg.seed, 3])
    report = CodecReport()
    for step in range(cfg.steps):
        idx = rng.choice(len(feats), size=min(cfg.batch, len(feats)), replace=False)
        codec.store.zero_grad()
        try:
            loss = chamfer_loss(codec.decoder(codec.encoder(feats[idx])), feats[idx])
        except FloatingPointError as exc:
            raise TrainingDiverged(f"victim codec diverged at step {step}: {exc}") from None
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"victim codec loss {value} at step {step}")
        tn.backward(loss)
        tn.adam_step(codec.store, cfg.lr)
        report.losses.append(value)
        if log is not None and step % 100 == 0:
            log(f"victim step {step} chamfer {value:.3e}")
    z = encode_batch(codec, feats)
    codec.latent_std = np.maximum(z.std(axis=0), 1e-6)
    report.latent_mean = z.mean(axis=0).tolist()
    report.latent_std = codec.latent_std.tolist()
    return codec, report


def encode_batch(codec: VictimCodec, feats: np.ndarray, chunk: int = 16) -> np.ndarray:
    out = []
    with tn.no_grad():
        for i in range(0, len(feats), chunk):
            out.append(codec.encoder(feats[i:i + chunk]).data)
    return np.concatenate(out)


@dataclass
class ShapeLatentRecord:
    z0: np.ndarray
    dataset: str = ""
    cloud_id: int = 0
    level: str | None = None


def encode(codec: VictimCodec, cloud: PointCloud, dataset: str = "", cloud_id: int = 0) -> ShapeLatentRecord:
    z = encode_batch(codec, stack_features([cloud], codec.cfg.c))[0]
    return ShapeLatentRecord(z, dataset, cloud_id)


def decode_optimal(codec: VictimCodec, z0: np.ndarray) -> PointCloud:
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape != (codec.cfg.dz,):
        raise ValueError(f"latent must have shape ({codec.cfg.dz},), got {z0.shape}")
    with tn.no_grad():
        out = codec.decoder(z0[None]).data[0]
    return PointCloud.from_features(out, codec.cfg.c)


def simulate_bitrate_noise(z0: np.ndarray, level: str, latent_std) -> np.ndarray:
    """Uniform quantization with a step of LEVELS[level] x per-dimension latent std.

    The steps nest (0.1 = 2 x 0.05 = 10 x 0.01), so the coarse grid is a subset
    of the fine one and the error can only grow with the level.
    """
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}; expected one of {sorted(LEVELS)}")
    step = LEVELS[level] * np.asarray(latent_std, dtype=np.float64)
    return np.round(np.asarray(z0, dtype=np.float64) / step) * step


# ---------------------------------------------------------------- latent records

def save_latents(records: list[ShapeLatentRecord], path) -> None:
    z = np.stack([r.z0 for r in records]).astype("<f8")
    count, dz = z.shape
    Path(path).write_bytes(LATENT_MAGIC + struct.pack("<II", count, dz) + z.tobytes())
    manifest = [{"dataset": r.dataset, "cloud_id": r.cloud_id, "level": r.level} for r in records]
    Path(str(path) + ".json").write_text(json.dumps({"count": count, "dz": dz, "records": manifest}, indent=2))


def load_latents(path) -> list[ShapeLatentRecord]:
    blob = Path(path).read_bytes()
    if blob[:4] != LATENT_MAGIC:
        raise ValueError("not a GCZL latent file")
    count, dz = struct.unpack_from("<II", blob, 4)
    z = np.frombuffer(blob, dtype="<f8", count=count * dz, offset=12).reshape(count, dz)
    if not np.isfinite(z).all():
        raise ValueError("latent file contains non-finite values")
    meta_path = Path(str(path) + ".json")
    meta = json.loads(meta_path.read_text())["records"] if meta_path.exists() else [{}] * count
    return [ShapeLatentRecord(z[i].copy(), m.get("dataset", ""), m.get("cloud_id", i), m.get("level"))
            for i, m in enumerate(meta)]
