"""Denoisers, latent-point generator and reconstruction decoder.

All four networks are built from a handful of blocks on top of
:mod:`gammacloud.tensor`:

* ``Dense`` / ``Norm`` / ``SharedMLP`` - per-point linear + (adaptive) group
  norm + LeakyReLU(0.1),
* ``ResSE`` - residual MLP block with squeeze-and-excitation gating,
* ``Attention`` - single-head scaled dot-product self attention,
* ``PointUNet`` - set abstraction / feature propagation hierarchy (point
  branch only; no voxel convolution).

Widths are multiplied by ``width``; ``width=1`` gives the full-size layer
dimensions.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as tn
from .pointcloud import fps, three_nn_weights
from .tensor import ParamStore, Tensor

LEAKY = 0.1
DROPOUT = 0.1
ADAGN_INIT_SCALE = 0.1


def scaled(d: int, width: float, minimum: int = 4) -> int:
    """Scale a layer width, rounding to a multiple of 4."""
    return max(minimum, int(round(d * width / 4.0)) * 4)


def groups_for(c: int, groups: int = 8, min_per_group: int = 4) -> int:
    """At most ``groups`` groups with at least ``min_per_group`` channels each.

    Narrow layers keep several channels per group; with one channel per
    group a per-channel constant (bias, time embedding) would be erased.
    """
    return math.gcd(c, max(1, min(groups, c // min_per_group)))


class Module:
    def __init__(self, store: ParamStore, name: str):
        self.store = store
        self.name = name

    def param(self, key: str, value) -> tn.Parameter:
        return self.store.create(f"{self.name}.{key}", value)


class Dense(Module):
    """Linear layer with Kaiming-uniform weights (LeakyReLU gain)."""

    def __init__(self, store, name, fin, fout, rng, zero=False, init_scale=1.0):
        super().__init__(store, name)
        self.fin, self.fout = fin, fout
        if zero:
            w = np.zeros((fin, fout))
        else:
            gain = math.sqrt(2.0 / (1.0 + LEAKY ** 2))
            bound = gain * math.sqrt(3.0 / fin) * init_scale
            w = rng.uniform(-bound, bound, (fin, fout))
        self.W = self.param("W", w)
        self.b = self.param("b", np.zeros(fout))

    def __call__(self, x):
        return tn.linear(x, self.W, self.b)


class Norm(Module):
    """Group norm followed by either a learned affine or an AdaGN modulation.

    AdaGN projects the conditioning vector to (factor, bias) per channel; the
    factor is ``1 + proj`` so a zero conditioning vector yields plain GN.
    """

    def __init__(self, store, name, channels, cond_dim, rng, groups=8, eps=1e-5):
        super().__init__(store, name)
        self.c = channels
        self.groups = groups_for(channels, groups)
        self.eps = eps
        self.cond_dim = cond_dim
        if cond_dim:
            self.proj = Dense(store, f"{name}.proj", cond_dim, 2 * channels, rng, init_scale=ADAGN_INIT_SCALE)
        else:
            self.gamma = self.param("gamma", np.ones(channels))
            self.beta = self.param("beta", np.zeros(channels))

    def __call__(self, x, cond=None):
        B, P, C = x.shape
        y = tn.group_norm(x, self.groups, self.eps)
        if not self.cond_dim:
            return y * tn.reshape(self.gamma, (1, 1, C)) + tn.reshape(self.beta, (1, 1, C))
        p = self.proj(cond)
        factor = tn.add(tn.reshape(p[:, :C], (B, 1, C)), Tensor(np.ones((1, 1, 1))))
        bias = tn.reshape(p[:, C:], (B, 1, C))
        return tn.add(tn.mul(y, factor), bias)


class SharedMLP(Module):
    """Per-point Linear -> (Ada)GN -> LeakyReLU over (B, P, C) or (B, M, K, C)."""

    def __init__(self, store, name, fin, fout, cond_dim, rng):
        super().__init__(store, name)
        self.lin = Dense(store, f"{name}.lin", fin, fout, rng)
        self.norm = Norm(store, f"{name}.norm", fout, cond_dim, rng)

    def __call__(self, x, cond=None):
        shape = x.shape
        if len(shape) == 4:
            x = tn.reshape(x, (shape[0], shape[1] * shape[2], shape[3]))
        y = tn.leaky_relu(self.norm(self.lin(x), cond), LEAKY)
        if len(shape) == 4:
            y = tn.reshape(y, shape[:3] + (y.shape[-1],))
        return y


class Attention(Module):
    """Single-head self attention with a residual connection."""

    def __init__(self, store, name, channels, dim, cond_dim, rng):
        super().__init__(store, name)
        self.norm = Norm(store, f"{name}.norm", channels, cond_dim, rng)
        self.q = Dense(store, f"{name}.q", channels, dim, rng)
        self.k = Dense(store, f"{name}.k", channels, dim, rng)
        self.v = Dense(store, f"{name}.v", channels, dim, rng)
        self.out = Dense(store, f"{name}.out", dim, channels, rng, init_scale=0.1)
        self.dim = dim

    def __call__(self, x, cond=None):
        h = self.norm(x, cond)
        q, k, v = self.q(h), self.k(h), self.v(h)
        scores = tn.scale(tn.matmul(q, tn.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.dim))
        att = tn.softmax(scores, axis=-1)
        return tn.add(x, self.out(tn.matmul(att, v)))


class SqueezeExcite(Module):
    def __init__(self, store, name, channels, rng, reduction=4):
        super().__init__(store, name)
        hidden = max(4, channels // reduction)
        self.fc1 = Dense(store, f"{name}.fc1", channels, hidden, rng)
        self.fc2 = Dense(store, f"{name}.fc2", hidden, channels, rng)

    def __call__(self, x):
        gate = tn.sigmoid(self.fc2(tn.leaky_relu(self.fc1(x), LEAKY)))
        return tn.mul(x, gate)


class ResSE(Module):
    """Residual block over (B, C) vectors: 2 x (GN, LeakyReLU, Linear), SE gate, add."""

    def __init__(self, store, name, channels, rng, cond_dim=0):
        super().__init__(store, name)
        self.n1 = Norm(store, f"{name}.n1", channels, cond_dim, rng)
        self.l1 = Dense(store, f"{name}.l1", channels, channels, rng)
        self.n2 = Norm(store, f"{name}.n2", channels, cond_dim, rng)
        self.l2 = Dense(store, f"{name}.l2", channels, channels, rng)
        self.se = SqueezeExcite(store, f"{name}.se", channels, rng)

    def __call__(self, x, train=False, rng=None, cond=None):
        B, C = x.shape
        h = tn.reshape(x, (B, 1, C))
        h = self.l1(tn.leaky_relu(self.n1(h, cond), LEAKY))
        h = self.l2(tn.dropout(tn.leaky_relu(self.n2(h, cond), LEAKY), DROPOUT, rng, train))
        h = self.se(tn.reshape(h, (B, C)))
        return tn.add(x, h)


class TimeEmbedding(Module):
    def __init__(self, store, name, sin_dim, hidden, out, rng):
        super().__init__(store, name)
        self.sin_dim = sin_dim
        self.l1 = Dense(store, f"{name}.l1", sin_dim, hidden, rng)
        self.l2 = Dense(store, f"{name}.l2", hidden, out, rng)

    def __call__(self, t):
        e = tn.sinusoidal_embed(np.asarray(t, dtype=np.float64), self.sin_dim)
        return self.l2(tn.leaky_relu(self.l1(e), LEAKY))


# ---------------------------------------------------------------- SLDM

@dataclass
class SLDMConfig:
    dz: int = 128
    width: float = 1.0 / 8
    blocks: int = 8
    hidden: int = 2048
    time_sin: int = 128
    time_hidden: int = 512

    def hidden_dim(self) -> int:
        return scaled(self.hidden, self.width)


class SLDMNet(Module):
    """Shape-latent noise predictor: Linear in, + time embedding, ResSE stack, zero-init Linear out."""

    def __init__(self, cfg: SLDMConfig, seed: int = 0, store: ParamStore | None = None):
        super().__init__(store if store is not None else ParamStore(), "sldm")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        h = cfg.hidden_dim()
        self.temb = TimeEmbedding(self.store, "sldm.temb", cfg.time_sin, scaled(cfg.time_hidden, cfg.width), h, rng)
        self.inp = Dense(self.store, "sldm.inp", cfg.dz, h, rng)
        self.blocks = [ResSE(self.store, f"sldm.block{i}", h, rng) for i in range(cfg.blocks)]
        self.out = Dense(self.store, "sldm.out", h, cfg.dz, rng, zero=True)

    def __call__(self, z_t, t, train=False, rng=None):
        z_t = tn.as_tensor(z_t)
        if z_t.ndim != 2 or z_t.shape[1] != self.cfg.dz:
            raise ValueError(f"SLDM expects (B, {self.cfg.dz}), got {z_t.shape}")
        t = np.broadcast_to(np.asarray(t), (z_t.shape[0],))
        h = tn.add(self.inp(z_t), self.temb(t))
        for blk in self.blocks:
            h = blk(h, train, rng)
        return self.out(h)


def sldm_predict(net: SLDMNet, z_t, t) -> np.ndarray:
    with tn.no_grad():
        return net(z_t, t).data


# ---------------------------------------------------------------- PointUNet

@dataclass
class PointNetConfig:
    in_channels: int
    out_channels: int
    cond_dim: int = 128
    time_dim: int = 0
    width: float = 1.0 / 8
    centers: tuple = (1024, 256, 64, 16)
    radius: tuple = (0.1, 0.2, 0.4, 0.8)
    neighbors: int = 32
    sa_pvc_layers: tuple = (2, 1, 1, 0)
    sa_pvc_hidden: tuple = (32, 64, 128, 0)
    sa_mlp: tuple = ((32, 32), (64, 128), (128, 256), (128, 128, 128))
    sa_attention: tuple = (0, 128, 0, 0)
    global_attention: int = 256
    fp_mlp: tuple = ((128, 128), (128, 128), (128, 128), (128, 128, 64))
    fp_pvc_layers: tuple = (3, 3, 2, 2)
    fp_pvc_hidden: tuple = (128, 128, 128, 64)
    fp_attention: tuple = (0, 0, 0, 0)
    head: tuple = (64, 128)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class GroupingPlan:
    """Position-only bookkeeping for one forward pass (no gradients)."""

    positions: list  # per level (B, n_l, 3)
    group_idx: list  # per SA (B, m, K)
    rel: list  # per SA (B, m, K, 3)
    interp_idx: list  # per FP (B, n_fine, 3)
    interp_w: list  # per FP (B, n_fine, 3, 1)


def make_plan(cfg: PointNetConfig, pos: np.ndarray) -> GroupingPlan:
    from scipy.spatial import cKDTree

    pos = np.asarray(pos, dtype=np.float64)
    B, N, _ = pos.shape
    levels, groups, rels = [pos], [], []
    cur = pos
    for m, r in zip(cfg.centers, cfg.radius):
        m = min(m, cur.shape[1])
        cidx = fps(cur, m)
        centers = np.take_along_axis(cur, cidx[:, :, None], axis=1)
        gidx = np.empty((B, m, cfg.neighbors), dtype=np.int64)
        for b in range(B):
            k = min(cfg.neighbors, cur.shape[1])
            d, idx = cKDTree(cur[b]).query(centers[b], k=k)
            if k == 1:
                d, idx = d[:, None], idx[:, None]
            idx = np.where(d <= r, idx, idx[:, :1])
            if k < cfg.neighbors:
                idx = np.concatenate([idx, np.repeat(idx[:, :1], cfg.neighbors - k, axis=1)], axis=1)
            gidx[b] = idx
        nb = cur[np.arange(B)[:, None, None], gidx]
        rels.append((nb - centers[:, :, None, :]) / r)
        groups.append(gidx)
        levels.append(centers)
        cur = centers
    iidx, iw = [], []
    for j in range(len(cfg.centers)):
        coarse, fine = levels[-1 - j], levels[-2 - j]
        idx_b, w_b = [], []
        for b in range(B):
            idx, w = three_nn_weights(fine[b], coarse[b], 3)
            if idx.shape[1] < 3:
                pad = 3 - idx.shape[1]
                idx = np.concatenate([idx, np.repeat(idx[:, :1], pad, axis=1)], axis=1)
                w = np.concatenate([w, np.zeros((len(w), pad))], axis=1)
            idx_b.append(idx)
            w_b.append(w)
        iidx.append(np.stack(idx_b))
        iw.append(np.stack(w_b)[..., None])
    return GroupingPlan(levels, groups, rels, iidx, iw)


class PointUNet(Module):
    def __init__(self, store, name, cfg: PointNetConfig, rng):
        super().__init__(store, name)
        self.cfg = cfg
        w = cfg.width
        cd = cfg.cond_dim
        td = cfg.time_dim
        c = cfg.in_channels
        self.sa_pvc, self.sa_mlp, self.sa_attn = [], [], []
        skip_ch = []
        for i in range(len(cfg.centers)):
            layers = []
            for j in range(cfg.sa_pvc_layers[i]):
                hd = scaled(cfg.sa_pvc_hidden[i], w)
                layers.append(SharedMLP(store, f"{name}.sa{i}.pvc{j}", c, hd, cd, rng))
                c = hd
            self.sa_pvc.append(layers)
            skip_ch.append(c)
            fin = c + 3 + td
            mlps = []
            for j, d in enumerate(cfg.sa_mlp[i]):
                d = scaled(d, w)
                mlps.append(SharedMLP(store, f"{name}.sa{i}.mlp{j}", fin, d, cd, rng))
                fin = d
            self.sa_mlp.append(mlps)
            c = fin
            a = cfg.sa_attention[i]
            self.sa_attn.append(Attention(store, f"{name}.sa{i}.attn", c, scaled(a, w), cd, rng) if a else None)
        self.global_attn = Attention(store, f"{name}.gattn", c, scaled(cfg.global_attention, w), cd, rng)
        self.fp_mlp, self.fp_pvc, self.fp_attn = [], [], []
        for j in range(len(cfg.centers)):
            fin = c + skip_ch[-1 - j] + td
            mlps = []
            for k, d in enumerate(cfg.fp_mlp[j]):
                d = scaled(d, w)
                mlps.append(SharedMLP(store, f"{name}.fp{j}.mlp{k}", fin, d, cd, rng))
                fin = d
            self.fp_mlp.append(mlps)
            pvcs = []
            for k in range(cfg.fp_pvc_layers[j]):
                hd = scaled(cfg.fp_pvc_hidden[j], w)
                pvcs.append(SharedMLP(store, f"{name}.fp{j}.pvc{k}", fin, hd, cd, rng))
                fin = hd
            self.fp_pvc.append(pvcs)
            a = cfg.fp_attention[j]
            self.fp_attn.append(Attention(store, f"{name}.fp{j}.attn", fin, scaled(a, w), cd, rng) if a else None)
            c = fin
        h0, h1 = scaled(cfg.head[0], w), scaled(cfg.head[1], w)
        if c != h0:
            raise ValueError(f"last FP width {c} != head input {h0}")
        self.head = SharedMLP(store, f"{name}.head", h0, h1, cd, rng)
        self.out = Dense(store, f"{name}.out", h1, cfg.out_channels, rng, zero=True)

    def __call__(self, feats, plan: GroupingPlan, cond=None, temb=None, train=False, rng=None):
        feats = tn.as_tensor(feats)
        B = feats.shape[0]
        if feats.shape[-1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {feats.shape[-1]}")
        f = feats
        skips = []
        for i in range(len(self.sa_mlp)):
            for layer in self.sa_pvc[i]:
                f = layer(f, cond)
            skips.append(f)
            g = tn.gather(f, plan.group_idx[i])
            parts = [g, Tensor(plan.rel[i])]
            if temb is not None:
                m, K = plan.group_idx[i].shape[1:]
                parts.append(tn.expand(tn.reshape(temb, (B, 1, 1, -1)), (B, m, K, temb.shape[-1])))
            x = tn.concat(parts, axis=-1)
            for layer in self.sa_mlp[i]:
                x = layer(x, cond)
            f = tn.max_pool(x, axis=2)
            if self.sa_attn[i] is not None:
                f = self.sa_attn[i](f, cond)
        f = self.global_attn(f, cond)
        for j in range(len(self.fp_mlp)):
            skip = skips[-1 - j]
            nb = tn.gather(f, plan.interp_idx[j])
            interp = tn.reduce_sum(tn.mul(nb, Tensor(plan.interp_w[j])), axis=2)
            parts = [interp, skip]
            if temb is not None:
                parts.append(tn.expand(tn.reshape(temb, (B, 1, -1)), (B, skip.shape[1], temb.shape[-1])))
            x = tn.concat(parts, axis=-1)
            for layer in self.fp_mlp[j]:
                x = layer(x, cond)
            for layer in self.fp_pvc[j]:
                x = layer(x, cond)
            if self.fp_attn[j] is not None:
                x = self.fp_attn[j](x, cond)
            f = x
        x = self.head(f, cond)
        x = tn.dropout(x, DROPOUT, rng, train)
        return self.out(x)


# ---------------------------------------------------------------- LPGDM

@dataclass
class LatentConfig:
    """Dimensions shared by the latent-point networks."""

    dz: int = 128
    dh: int = 4
    c: int = 0
    n: int = 2048
    width: float = 1.0 / 8
    centers: tuple = (1024, 256, 64, 16)
    radius: tuple = (0.1, 0.2, 0.4, 0.8)
    neighbors: int = 32

    @property
    def point_dim(self) -> int:
        return 3 + self.c + self.dh

    def unet(self, **kw) -> PointNetConfig:
        base = dict(cond_dim=self.dz, width=self.width, centers=tuple(self.centers),
                    radius=tuple(self.radius), neighbors=self.neighbors)
        base.update(kw)
        return PointNetConfig(**base)


class LPGDMNet(Module):
    """Latent-point noise predictor conditioned on the shape latent via AdaGN."""

    def __init__(self, cfg: LatentConfig, seed: int = 0, store: ParamStore | None = None):
        super().__init__(store if store is not None else ParamStore(), "lpgdm")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        td = scaled(64, cfg.width)
        self.temb = TimeEmbedding(self.store, "lpgdm.temb", 64, td, td, rng)
        self.unet = PointUNet(self.store, "lpgdm.unet",
                              cfg.unet(in_channels=cfg.point_dim, out_channels=cfg.point_dim, time_dim=td,
                                       sa_mlp=((32, 32), (64, 128), (128, 128), (128, 128, 128))), rng)

    def __call__(self, h_t, z, t, train=False, rng=None, plan=None):
        h_t = tn.as_tensor(h_t)
        if h_t.ndim != 3 or h_t.shape[-1] != self.cfg.point_dim:
            raise ValueError(f"LPGDM expects (B, N, {self.cfg.point_dim}), got {h_t.shape}")
        z = tn.as_tensor(z)
        if z.shape != (h_t.shape[0], self.cfg.dz):
            raise ValueError(f"LPGDM condition must be (B, {self.cfg.dz}), got {z.shape}")
        t = np.broadcast_to(np.asarray(t), (h_t.shape[0],))
        if plan is None:
            plan = make_plan(self.unet.cfg, h_t.data[..., :3])
        return self.unet(h_t, plan, cond=z, temb=self.temb(t), train=train, rng=rng)


def lpgdm_predict(net: LPGDMNet, h_t, z0, t) -> np.ndarray:
    with tn.no_grad():
        return net(h_t, z0, t).data


# ---------------------------------------------------------------- LPG

LPG_RESIDUAL = 0.01
RD_RESIDUAL = 0.01


def sphere_template(n: int, seed: int = 0) -> np.ndarray:
    """n FPS-spread points on the sphere inscribed in the unit cube."""
    m = 4 * n
    i = np.arange(m) + 0.5
    phi = np.arccos(1 - 2 * i / m)
    theta = np.pi * (1 + 5 ** 0.5) * i
    dense = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    idx = fps(dense, n)
    return 0.5 + 0.5 * dense[idx]


class LPGNet(Module):
    """Latent point generator q(h0 | x, z0) plus the generation path from z0 alone.

    Also owns the affine re-embedding of the (normalized) victim latent whose
    Gaussian posterior carries the shape-latent KL term.
    """

    def __init__(self, cfg: LatentConfig, seed: int = 0, store: ParamStore | None = None,
                 gen_scale: float = 1.0, logvar_offset: float = -6.0):
        super().__init__(store if store is not None else ParamStore(), "lpg")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.gen_scale = gen_scale
        self.logvar_offset = logvar_offset
        self.z_scale = self.param("z_scale", np.ones(cfg.dz))
        self.z_shift = self.param("z_shift", np.zeros(cfg.dz))
        self.z_logvar = self.param("z_logvar", np.full(cfg.dz, -4.0))
        d_in = 3 + cfg.c
        self.unet = PointUNet(self.store, "lpg.unet",
                              cfg.unet(in_channels=d_in, out_channels=2 * cfg.point_dim,
                                       fp_attention=(0, 128, 0, 0)), rng)
        self.template = sphere_template(cfg.n)
        self._template_plan = None

    # shape-latent embedding -------------------------------------------------
    def embed(self, z_norm, rng=None, sample=False):
        """Return (embedding, mean, logvar) for a normalized latent batch."""
        z = tn.as_tensor(z_norm)
        B, D = z.shape
        mu = tn.add(tn.mul(z, tn.reshape(self.z_scale, (1, D))), tn.reshape(self.z_shift, (1, D)))
        logvar = tn.expand(tn.reshape(self.z_logvar, (1, D)), (B, D))
        if not sample:
            return mu, mu, logvar
        eps = Tensor(rng.normal((B, D)) if hasattr(rng, "normal") else rng.standard_normal((B, D)))
        return tn.add(mu, tn.mul(tn.exp(tn.scale(logvar, 0.5)), eps)), mu, logvar

    # encoder (train mode) ---------------------------------------------------
    def encode(self, x, cond, train=False, rng=None, plan=None):
        """x (B, N, 3+c) raw cloud features -> (mu, logvar) of shape (B, N, point_dim)."""
        x = tn.as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != 3 + self.cfg.c:
            raise ValueError(f"LPG expects (B, N, {3 + self.cfg.c}) input, got {x.shape}")
        if plan is None:
            plan = make_plan(self.unet.cfg, x.data[..., :3])
        out = self.unet(x, plan, cond=cond, train=train, rng=rng)
        D = self.cfg.point_dim
        B, N, _ = x.shape
        anchor = x
        if self.cfg.dh:
            anchor = tn.concat([x, Tensor(np.zeros((B, N, self.cfg.dh)))], axis=-1)
        mu = tn.add(anchor, tn.scale(out[..., :D], LPG_RESIDUAL))
        logvar = tn.add(out[..., D:], Tensor(np.full((1, 1, 1), self.logvar_offset)))
        return mu, logvar

    # generation (inference mode) --------------------------------------------
    def template_plan(self, batch: int) -> GroupingPlan:
        if self._template_plan is None:
            self._template_plan = make_plan(self.unet.cfg, self.template[None])
        p = self._template_plan
        rep = lambda arrs: [np.repeat(a, batch, axis=0) for a in arrs]
        return GroupingPlan(rep(p.positions), rep(p.group_idx), rep(p.rel), rep(p.interp_idx), rep(p.interp_w))

    def generate(self, cond, train=False, rng=None, sample=False, sample_rng=None):
        """Latent points from the shape latent alone, anchored on the sphere template."""
        cond = tn.as_tensor(cond)
        B = cond.shape[0]
        c = self.cfg.c
        D = self.cfg.point_dim
        base = np.concatenate([self.template, np.full((len(self.template), c), 0.5)], axis=1)
        feats = np.repeat(base[None], B, axis=0)
        out = self.unet(Tensor(feats), self.template_plan(B), cond=cond, train=train, rng=rng)
        scale = np.full((1, 1, D), LPG_RESIDUAL)
        scale[..., :3 + c] = self.gen_scale
        anchor = np.zeros((B, len(self.template), D))
        anchor[..., :3 + c] = feats
        mu = tn.add(Tensor(anchor), tn.mul(out[..., :D], Tensor(scale)))
        if not sample:
            return mu
        logvar = tn.add(out[..., D:], Tensor(np.full((1, 1, 1), self.logvar_offset)))
        return lpg_sample(mu, logvar, sample_rng)


def lpg_sample(mu, logvar, rng):
    """Reparameterized draw mu + exp(logvar / 2) * eps."""
    mu, logvar = tn.as_tensor(mu), tn.as_tensor(logvar)
    noise = rng.normal(mu.shape) if hasattr(rng, "normal") else rng.standard_normal(mu.shape)
    return tn.add(mu, tn.mul(tn.exp(tn.scale(logvar, 0.5)), Tensor(noise)))


def gaussian_kl(mu, logvar):
    """Mean over elements of KL(N(mu, exp(logvar)) || N(0, 1))."""
    mu, logvar = tn.as_tensor(mu), tn.as_tensor(logvar)
    term = tn.sub(tn.add(tn.square(mu), tn.exp(logvar)), tn.add(logvar, Tensor(np.ones((1,) * mu.ndim))))
    return tn.scale(tn.reduce_mean(term), 0.5)


def lpg_encode(net: LPGNet, x, z0, train=False, rng=None):
    if x is None:
        raise ValueError("lpg_encode needs the raw cloud; use lpg_generate at inference")
    return net.encode(x, z0, train=train, rng=rng)


def lpg_generate(net: LPGNet, z0, sample=False, rng=None):
    with tn.no_grad():
        return net.generate(z0, sample=sample, sample_rng=rng).data


# ---------------------------------------------------------------- RD

class RDNet(Module):
    """Reconstruction decoder p(x' | h0, z0): x' = h0[:3+c] + 0.01 * net."""

    def __init__(self, cfg: LatentConfig, seed: int = 0, store: ParamStore | None = None):
        super().__init__(store if store is not None else ParamStore(), "rd")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.unet = PointUNet(self.store, "rd.unet",
                              cfg.unet(in_channels=cfg.point_dim, out_channels=3 + cfg.c), rng)

    def __call__(self, h0, cond, train=False, rng=None, plan=None):
        h0 = tn.as_tensor(h0)
        if h0.ndim != 3 or h0.shape[-1] != self.cfg.point_dim:
            raise ValueError(f"RD expects (B, N, {self.cfg.point_dim}), got {h0.shape}")
        if plan is None:
            plan = make_plan(self.unet.cfg, h0.data[..., :3])
        out = self.unet(h0, plan, cond=cond, train=train, rng=rng)
        return tn.add(h0[..., :3 + self.cfg.c], tn.scale(out, RD_RESIDUAL))


def rd_decode(net: RDNet, h0, z0) -> np.ndarray:
    with tn.no_grad():
        return net(h0, z0).data
