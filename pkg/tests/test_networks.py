import numpy as np
import pytest

from gammacloud import diffusion as D
from gammacloud import networks as nets
from gammacloud import tensor as tn
from gammacloud.rng import RngStream
from gammacloud.tensor import Parameter, ParamStore, Tensor

from gradcheck import check_params

TOY = dict(dz=8, dh=2, c=0, n=64, width=1 / 16, centers=(16, 8, 4, 2), radius=(0.25, 0.5, 1.0, 2.0), neighbors=4)


def toy_cfg(**kw):
    return nets.LatentConfig(**{**TOY, **kw})


def randomize_zero_layers(store: ParamStore, seed=0, scale=0.3):
    """Give zero-initialized output layers random weights so every parameter receives gradient."""
    rng = np.random.default_rng(seed)
    for name, p in store.items():
        if name.endswith(".W") and not p.data.any():
            p.data[...] = scale * rng.standard_normal(p.shape)


def toy_points(b=2, n=64, seed=0, channels=3):
    return np.random.default_rng(seed).random((b, n, channels))


# ---------------------------------------------------------------- blocks

def test_scaled_widths():
    assert nets.scaled(2048, 1.0) == 2048 and nets.scaled(2048, 1 / 8) == 256
    assert nets.scaled(32, 1 / 16) == 4 and nets.scaled(128, 1 / 8) == 16
    assert nets.groups_for(12) == 3 and nets.groups_for(16) == 4 and nets.groups_for(64) == 8
    assert nets.groups_for(4) == 1 and nets.groups_for(36) == 4


def test_adagn_zero_condition_is_group_norm():
    store = ParamStore()
    norm = nets.Norm(store, "n", 16, 8, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).standard_normal((3, 10, 16)))
    out = norm(x, Tensor(np.zeros((3, 8))))
    ref = tn.group_norm(x, 4, 1e-5)
    assert np.abs(out.data - ref.data).max() < 1e-12


def test_adagn_init_scale_keeps_modulation_small():
    store = ParamStore()
    norm = nets.Norm(store, "n", 16, 8, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).standard_normal((2, 10, 16)))
    cond = Tensor(np.random.default_rng(2).standard_normal((2, 8)))
    rel = np.abs(norm(x, cond).data - tn.group_norm(x, 4).data).max()
    assert 0 < rel < 1.0


def test_resse_shape_preserved():
    store = ParamStore()
    blk = nets.ResSE(store, "r", 12, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).standard_normal((5, 12)))
    assert blk(x).shape == (5, 12)


def test_plan_counts_and_weights():
    cfg = toy_cfg().unet(in_channels=3, out_channels=3)
    pos = toy_points()
    plan = nets.make_plan(cfg, pos)
    assert [p.shape[1] for p in plan.positions] == [64, 16, 8, 4, 2]
    for g, m in zip(plan.group_idx, cfg.centers):
        assert g.shape == (2, m, cfg.neighbors)
    for j, w in enumerate(plan.interp_w):
        assert w.shape[1] == plan.positions[-2 - j].shape[1]
        np.testing.assert_allclose(w.sum(axis=2), 1.0, atol=1e-12)
    np.testing.assert_array_equal(plan.positions[0], pos)


def test_grouping_pads_with_first_hit():
    cfg = toy_cfg(radius=(1e-9, 1e-9, 1e-9, 1e-9)).unet(in_channels=3, out_channels=3)
    plan = nets.make_plan(cfg, toy_points(b=1))
    for g in plan.group_idx:
        assert np.all(g == g[..., :1])


# ---------------------------------------------------------------- init contracts

def test_sldm_zero_init_and_determinism():
    net = nets.SLDMNet(nets.SLDMConfig(dz=8, width=1 / 64, blocks=2, time_sin=16, time_hidden=64))
    z = np.random.default_rng(0).standard_normal((3, 8))
    out = nets.sldm_predict(net, z, 5)
    assert out.shape == (3, 8) and np.all(out == 0)
    randomize_zero_layers(net.store)
    assert nets.sldm_predict(net, z, 5).tobytes() == nets.sldm_predict(net, z, 5).tobytes()
    with pytest.raises(ValueError):
        nets.sldm_predict(net, np.zeros((3, 7)), 5)


def test_lpgdm_zero_init_and_conditioning_is_live():
    cfg = toy_cfg()
    net = nets.LPGDMNet(cfg)
    h = toy_points(channels=cfg.point_dim)
    z = np.random.default_rng(1).standard_normal((2, cfg.dz))
    assert np.all(nets.lpgdm_predict(net, h, z, 3) == 0)
    randomize_zero_layers(net.store)
    a = nets.lpgdm_predict(net, h, z, 3)
    b = nets.lpgdm_predict(net, h, 2 * z, 3)
    assert a.shape == h.shape and np.abs(a - b).max() > 0
    with pytest.raises(ValueError):
        nets.lpgdm_predict(net, h[..., :3], z, 3)
    with pytest.raises(ValueError):
        nets.lpgdm_predict(net, h, z[:, :4], 3)


def test_lpgdm_permutation_equivariant():
    cfg = toy_cfg()
    net = nets.LPGDMNet(cfg, seed=2)
    randomize_zero_layers(net.store)
    h = toy_points(b=1, channels=cfg.point_dim, seed=4)
    z = np.random.default_rng(5).standard_normal((1, cfg.dz))
    perm = np.concatenate([[0], 1 + np.random.default_rng(6).permutation(63)])
    a = nets.lpgdm_predict(net, h, z, 7)
    b = nets.lpgdm_predict(net, h[:, perm], z, 7)
    np.testing.assert_allclose(b, a[:, perm], atol=1e-10)


def test_lpg_residual_contract():
    cfg = toy_cfg()
    net = nets.LPGNet(cfg)
    x = toy_points()
    z = np.random.default_rng(1).standard_normal((2, cfg.dz))
    mu, logvar = nets.lpg_encode(net, x, z)
    assert mu.shape == (2, 64, cfg.point_dim) and logvar.shape == mu.shape
    np.testing.assert_array_equal(mu.data[..., :3], x)
    np.testing.assert_array_equal(mu.data[..., 3:], 0.0)
    np.testing.assert_array_equal(logvar.data, -6.0)
    h = nets.lpg_sample(mu, logvar, RngStream(0)).data
    noise = RngStream(0).normal(mu.shape)
    np.testing.assert_allclose(h - mu.data, np.exp(-3.0) * noise, atol=1e-15)
    with pytest.raises(ValueError):
        nets.lpg_encode(net, None, z)


def test_lpg_generate_anchors_on_template():
    cfg = toy_cfg()
    net = nets.LPGNet(cfg)
    z = np.random.default_rng(1).standard_normal((3, cfg.dz))
    h = nets.lpg_generate(net, z)
    assert h.shape == (3, 64, cfg.point_dim)
    np.testing.assert_array_equal(h[0, :, :3], net.template)
    tpl = nets.sphere_template(64)
    np.testing.assert_allclose(np.linalg.norm(tpl - 0.5, axis=1), 0.5, atol=1e-12)
    assert len(np.unique(tpl, axis=0)) == 64


def test_rd_zero_init_is_identity_on_geometry():
    cfg = toy_cfg()
    net = nets.RDNet(cfg)
    h = toy_points(channels=cfg.point_dim)
    z = np.zeros((2, cfg.dz))
    np.testing.assert_array_equal(nets.rd_decode(net, h, z), h[..., :3])
    with pytest.raises(ValueError):
        nets.rd_decode(net, h[..., :3], z)


def test_rd_gradient_reaches_inputs():
    cfg = toy_cfg()
    net = nets.RDNet(cfg)
    randomize_zero_layers(net.store)
    h = Parameter(toy_points(channels=cfg.point_dim))
    z = Parameter(np.random.default_rng(1).standard_normal((2, cfg.dz)))
    tn.backward(tn.reduce_sum(tn.square(net(h, z))))
    assert np.abs(h.grad).max() > 0 and np.abs(z.grad).max() > 0


def test_gaussian_kl_values():
    assert nets.gaussian_kl(np.zeros((2, 5)), np.zeros((2, 5))).item() == 0.0
    assert nets.gaussian_kl(np.ones((2, 5)), np.zeros((2, 5))).item() == pytest.approx(0.5, abs=1e-15)
    lv = np.full(4, np.log(2.0))
    assert nets.gaussian_kl(np.zeros(4), lv).item() == pytest.approx(0.5 * (2 - 1 - np.log(2)), abs=1e-15)


# ---------------------------------------------------------------- full-width dimensions

def _shape(store, name):
    return store[name].shape


def test_full_width_point_networks_match_layer_tables():
    cfg = nets.LatentConfig(dz=128, dh=4, c=3, n=2048, width=1.0)
    D_pt = cfg.point_dim
    lpgdm, lpg, rd = nets.LPGDMNet(cfg).store, nets.LPGNet(cfg).store, nets.RDNet(cfg).store
    # time embedding 64 -> 64 -> 64
    assert _shape(lpgdm, "lpgdm.temb.l1.W") == (64, 64) and _shape(lpgdm, "lpgdm.temb.l2.W") == (64, 64)
    for store, prefix, sa3, out in [(lpgdm, "lpgdm.unet", 128, D_pt), (lpg, "lpg.unet", 256, 2 * D_pt),
                                    (rd, "rd.unet", 256, 3 + cfg.c)]:
        # PVC stand-in layers: 2 / 1 / 1 / none, hidden 32 / 64 / 128
        assert _shape(store, f"{prefix}.sa0.pvc1.lin.W") == (32, 32)
        assert _shape(store, f"{prefix}.sa1.pvc0.lin.W")[1] == 64
        assert _shape(store, f"{prefix}.sa2.pvc0.lin.W")[1] == 128
        assert f"{prefix}.sa3.pvc0.lin.W" not in store
        widths = [[_shape(store, f"{prefix}.sa{i}.mlp{j}.lin.W")[1] for j in range(3)
                   if f"{prefix}.sa{i}.mlp{j}.lin.W" in store] for i in range(4)]
        assert widths == [[32, 32], [64, 128], [128, sa3], [128, 128, 128]]
        assert _shape(store, f"{prefix}.sa1.attn.q.W") == (128, 128)
        assert _shape(store, f"{prefix}.gattn.q.W") == (128, 256)
        fp = [[_shape(store, f"{prefix}.fp{i}.mlp{j}.lin.W")[1] for j in range(3)
               if f"{prefix}.fp{i}.mlp{j}.lin.W" in store] for i in range(4)]
        assert fp == [[128, 128], [128, 128], [128, 128], [128, 128, 64]]
        pvc = [sum(f"{prefix}.fp{i}.pvc{j}.lin.W" in store for j in range(4)) for i in range(4)]
        assert pvc == [3, 3, 2, 2]
        assert _shape(store, f"{prefix}.fp3.pvc1.lin.W")[1] == 64
        assert _shape(store, f"{prefix}.head.lin.W") == (64, 128)
        assert _shape(store, f"{prefix}.out.W") == (128, out)
    assert "lpg.unet.fp1.attn.q.W" in lpg and "rd.unet.fp1.attn.q.W" not in rd


def test_full_width_sldm_dimensions():
    cfg = nets.SLDMConfig(width=1.0)
    assert cfg.blocks == 8 and cfg.hidden_dim() == 2048
    store = nets.SLDMNet(nets.SLDMConfig(width=1.0, blocks=1)).store
    assert _shape(store, "sldm.temb.l1.W") == (128, 512)
    assert _shape(store, "sldm.temb.l2.W") == (512, 2048)
    assert _shape(store, "sldm.inp.W") == (128, 2048)
    assert _shape(store, "sldm.block0.l1.W") == (2048, 2048)
    assert _shape(store, "sldm.out.W") == (2048, 128)


# ---------------------------------------------------------------- end-to-end gradient checks

def _weights(shape, seed=9):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


def _sldm_case():
    net = nets.SLDMNet(nets.SLDMConfig(dz=6, width=1 / 128, blocks=2, time_sin=8, time_hidden=64), seed=1)
    randomize_zero_layers(net.store)
    z = Parameter(np.random.default_rng(0).standard_normal((3, 6)))
    w = _weights((3, 6))
    fn = lambda: tn.reduce_sum(tn.mul(net(z, np.array([1, 4, 9])), w))
    return fn, list(net.store.values()) + [z], 6


def _lpgdm_case():
    cfg = toy_cfg()
    net = nets.LPGDMNet(cfg, seed=3)
    randomize_zero_layers(net.store)
    h = Parameter(toy_points(b=1, channels=cfg.point_dim, seed=2))
    z = Parameter(np.random.default_rng(3).standard_normal((1, cfg.dz)))
    plan = nets.make_plan(net.unet.cfg, h.data[..., :3])
    w = _weights(h.shape)
    fn = lambda: tn.reduce_sum(tn.mul(net(h, z, 4, plan=plan), w))
    return fn, list(net.store.values()) + [h, z], 3


def _lpg_encode_case():
    cfg = toy_cfg()
    net = nets.LPGNet(cfg, seed=4)
    randomize_zero_layers(net.store)
    x = Parameter(toy_points(b=1, seed=5))
    z = Parameter(np.random.default_rng(6).standard_normal((1, cfg.dz)))
    plan = nets.make_plan(net.unet.cfg, x.data)
    w1, w2 = _weights((1, 64, cfg.point_dim), 1), _weights((1, 64, cfg.point_dim), 2)

    def fn():
        emb, _, _ = net.embed(z)
        mu, logvar = net.encode(x, emb, plan=plan)
        return tn.add(tn.reduce_sum(tn.mul(mu, w1)), tn.reduce_sum(tn.mul(tn.scale(logvar, 0.1), w2)))

    return fn, list(net.store.values()) + [x, z], 3


def _lpg_generate_case():
    cfg = toy_cfg()
    net = nets.LPGNet(cfg, seed=7)
    randomize_zero_layers(net.store)
    z = Parameter(np.random.default_rng(8).standard_normal((2, cfg.dz)))
    w = _weights((2, 64, cfg.point_dim))
    fn = lambda: tn.reduce_sum(tn.mul(net.generate(z), w))
    params = [p for n, p in net.store.items() if not n.startswith("lpg.z_")]
    return fn, params + [z], 3


def _rd_case():
    cfg = toy_cfg(c=3)
    net = nets.RDNet(cfg, seed=9)
    randomize_zero_layers(net.store)
    h = Parameter(toy_points(b=1, channels=cfg.point_dim, seed=10))
    z = Parameter(np.random.default_rng(11).standard_normal((1, cfg.dz)))
    plan = nets.make_plan(net.unet.cfg, h.data[..., :3])
    w = _weights((1, 64, 6))
    fn = lambda: tn.reduce_sum(tn.mul(net(h, z, plan=plan), w))
    return fn, list(net.store.values()) + [h, z], 3


GRAD_CASES = {"sldm": _sldm_case, "lpgdm": _lpgdm_case, "lpg_encode": _lpg_encode_case,
              "lpg_generate": _lpg_generate_case, "rd": _rd_case}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_network_gradient_check(name):
    fn, params, max_entries = GRAD_CASES[name]()
    assert check_params(fn, params, max_entries=max_entries) < 1e-4


# ---------------------------------------------------------------- toy training

def test_sldm_learns_toy_latents():
    """On a 2-D four-cluster latent set the trained denoiser halves the zero-predictor loss."""
    T = 50
    sched = D.desk_schedule(T)
    rng = RngStream(0)
    centers = np.array([[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]])
    data = centers[rng.integers(0, 4, 4096)] + 0.05 * rng.normal((4096, 2))
    net = nets.SLDMNet(nets.SLDMConfig(dz=2, width=1 / 32, blocks=2, time_sin=16, time_hidden=128), seed=0)
    for _ in range(5000):
        x0 = data[rng.integers(0, len(data), 64)]
        t = rng.integers(1, T + 1, 64)
        xt, eps = D.gaussian_forward(sched, x0, t, rng)
        net.store.zero_grad()
        tn.backward(D.sldm_loss(eps, net(xt, t, train=True, rng=rng.generator)))
        tn.adam_step(net.store, 2e-3)
    ev = RngStream(99)
    x0 = data[ev.integers(0, len(data), 4000)]
    t = ev.integers(1, T + 1, 4000)
    xt, eps = D.gaussian_forward(sched, x0, t, ev)
    trained = D.sldm_loss(eps, nets.sldm_predict(net, xt, t))
    zero = D.sldm_loss(eps, np.zeros_like(eps))
    assert trained < 0.5 * zero
