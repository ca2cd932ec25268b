import numpy as np
import pytest
import torch

from ssdc.models import (
    Autoencoder,
    AutoencoderConfig,
    ConditionalDecoder,
    Denoiser,
    DenoiserConfig,
    ScheduleConfig,
    ZeroConv,
    build_early_fusion_conditional_encoder,
    build_early_fusion_frozen,
    build_late_fusion,
    build_unconditional,
    depth_readout,
    fuse,
    load_autoencoder,
    load_model,
    save_autoencoder,
    save_model,
    state_hash,
)
from ssdc.models.checkpoint import load_arrays, save_arrays

from oracles import directional_fd_check, l1_far_from_kink

SMALL_AE = AutoencoderConfig(base_width=8)
SMALL_DEN = DenoiserConfig(width=16, temb_dim=32)
TOY = ScheduleConfig(100, 1e-3, 0.2)


@pytest.fixture(scope="module")
def ae():
    torch.manual_seed(0)
    return Autoencoder(SMALL_AE).eval()


@pytest.fixture(scope="module")
def den():
    torch.manual_seed(1)
    return Denoiser(SMALL_DEN)


# -- autoencoder ---------------------------------------------------------------


def test_encode_decode_shapes(ae):
    with torch.no_grad():
        z = ae.encode(torch.zeros(1, 3, 64, 48))
        assert z.shape == (1, 4, 8, 6) and torch.isfinite(z).all()
        assert ae.decode(torch.randn(2, 4, 5, 7)).shape == (2, 3, 40, 56)


def test_encoder_deterministic(ae):
    x = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        assert torch.equal(ae.encode(x), ae.encode(x.clone()))
        z = torch.randn(1, 4, 4, 4)
        assert torch.equal(ae.decode(z), ae.decode(z.clone()))


@pytest.mark.parametrize("shape", [(1, 3, 60, 64), (1, 1, 64, 64), (3, 64, 64)])
def test_encoder_rejects_bad_shapes(ae, shape):
    with pytest.raises(ValueError):
        ae.encode(torch.zeros(shape))


def test_feature_resolution_table():
    # traced by hand: conv-in and mid at 1/8, then x2 per up stage
    assert AutoencoderConfig().feature_resolutions(64, 64) == [(8, 8), (8, 8), (16, 16), (32, 32), (64, 64)]
    assert AutoencoderConfig().decoder_feature_channels() == [64, 64, 64, 64, 32]
    assert AutoencoderConfig().encoder_feature_channels() == [64, 64, 64, 32, 16]


def test_decoder_exposes_five_levels(ae):
    seen = []

    def hook(level, f):
        seen.append((level, tuple(f.shape[1:])))
        return f

    with torch.no_grad():
        ae.decode(torch.randn(1, 4, 8, 8), hook)
    res = SMALL_AE.feature_resolutions(64, 64)
    chans = SMALL_AE.decoder_feature_channels()
    assert seen == [(i, (c, *r)) for i, (c, r) in enumerate(zip(chans, res))]


# -- conditional decoder ---------------------------------------------------------


def test_condition_features_match_decoder_levels(ae):
    dc = ConditionalDecoder.from_autoencoder(ae)
    with torch.no_grad():
        feats = dc.condition_features(torch.zeros(1, 3, 64, 64))
    assert [tuple(f.shape[1:]) for f in feats] == [
        (c, *r) for c, r in zip(SMALL_AE.encoder_feature_channels(), SMALL_AE.feature_resolutions(64, 64))
    ]
    assert all(torch.isfinite(f).all() for f in feats)
    for k, v in ae.encoder.state_dict().items():
        if not k.startswith(("norm_out", "conv_out")):
            assert torch.equal(dc.condition.body.state_dict()[k], v)


def test_fusion_convs_zero_at_init(ae):
    dc = ConditionalDecoder.from_autoencoder(ae)
    assert len(dc.fusions) == 5
    for conv in dc.fusions:
        assert not conv.weight.any() and not conv.bias.any()


def test_zero_init_preserves_decoder(ae):
    dc = ConditionalDecoder.from_autoencoder(ae)
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _ in range(10):
            z = torch.randn(2, 4, 8, 8, generator=g)
            c = torch.randn(2, 3, 64, 64, generator=g)
            out = dc(z, c)
            assert out.shape == (2, 64, 64)
            assert torch.equal(out, depth_readout(ae.decode(z)))


def test_conditional_decoder_shape_mismatch(ae):
    dc = ConditionalDecoder.from_autoencoder(ae)
    with pytest.raises(ValueError):
        dc(torch.zeros(1, 4, 8, 8), torch.zeros(1, 3, 32, 32))


def test_fuse_zero_weights_returns_f_dec():
    f_dec, f_cond = torch.randn(1, 3, 4, 4), torch.randn(1, 2, 4, 4)
    assert torch.equal(fuse(f_dec, f_cond, ZeroConv(5, 3)), f_dec)


def test_fuse_hand_example():
    # weights read only the condition channels with value w: out = f_dec + w * sum(f_cond)
    f_dec = torch.tensor([1.0, -2.0]).reshape(1, 2, 1, 1)
    f_cond = torch.tensor([0.5, 3.0, -1.0]).reshape(1, 3, 1, 1)
    conv = ZeroConv(5, 2)
    with torch.no_grad():
        conv.weight[:, 2:] = 0.25
    out = fuse(f_dec, f_cond, conv).flatten()
    # hand: 0.25 * (0.5 + 3 - 1) = 0.625
    assert out.tolist() == [1.625, -1.375]


def test_fuse_gradient_nonzero_at_zero_init():
    conv = ZeroConv(4, 2)
    fuse(torch.randn(1, 2, 3, 3), torch.randn(1, 2, 3, 3), conv).sum().backward()
    assert conv.weight.grad.abs().sum() > 0 and conv.bias.grad.abs().sum() > 0


def test_fuse_spatial_mismatch():
    with pytest.raises(ValueError):
        fuse(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 2, 2), ZeroConv(4, 2))


# -- denoiser ----------------------------------------------------------------------


def test_denoiser_shape_and_determinism(den):
    x = torch.randn(2, 8, 8, 8)
    with torch.no_grad():
        a, b = den(x, 5), den(x, torch.tensor([5, 5]))
    assert a.shape == (2, 4, 8, 8)
    assert torch.equal(a, b)


def test_denoiser_rejects_wrong_channels(den):
    with pytest.raises(ValueError):
        den(torch.zeros(1, 12, 8, 8), 1)


def test_widen_input_is_exact_at_init(den):
    wide = den.widen_input(4)
    assert wide.cfg.in_channels == 12
    x = torch.randn(1, 8, 8, 8)
    extra = torch.randn(1, 4, 8, 8)
    with torch.no_grad():
        torch.testing.assert_close(wide(torch.cat([x, extra], 1), 7), den(x, 7), rtol=0, atol=1e-6)


# -- variants --------------------------------------------------------------------


@pytest.mark.parametrize("builder", [build_late_fusion, build_early_fusion_frozen, build_early_fusion_conditional_encoder, build_unconditional])
def test_variant_forward_shapes(ae, den, builder):
    m = builder(ae, den, TOY)
    with torch.no_grad():
        out = m(torch.randn(2, 3, 64, 64), torch.randn(2, 3, 64, 64))
    assert out.shape == (2, 64, 64) and torch.isfinite(out).all()


def test_early_variants_need_condition(ae, den):
    m = build_early_fusion_conditional_encoder(ae, den, TOY)
    with pytest.raises(ValueError):
        m(torch.randn(1, 3, 64, 64))


def test_param_groups(ae, den):
    late = build_late_fusion(ae, den, TOY)
    g = late.param_groups()
    assert {id(p) for p in g["decoder"]} == {id(p) for p in late.cond_decoder.parameters()}
    assert {id(p) for p in g["unet"]} == {id(p) for p in late.denoiser.parameters()}
    ef = build_early_fusion_frozen(ae, den, TOY)
    assert not ef.param_groups()["unet"]
    ids = {id(p) for grp in g.values() for p in grp}
    assert not ids & {id(p) for p in late.autoencoder.parameters()}


@pytest.mark.parametrize("builder", [build_late_fusion, build_early_fusion_frozen, build_early_fusion_conditional_encoder])
def test_frozen_autoencoder_unchanged_by_training_step(ae, den, builder):
    m = builder(ae, den, TOY)
    before = state_hash(m.autoencoder)
    opt = torch.optim.AdamW([p for grp in m.param_groups().values() for p in grp], lr=1e-2)
    m.train()
    loss = m(torch.randn(2, 3, 64, 64), torch.randn(2, 3, 64, 64)).abs().mean()
    loss.backward()
    assert all(p.grad is None for p in m.autoencoder.parameters())
    opt.step()
    assert state_hash(m.autoencoder) == before
    assert not m.autoencoder.training


# -- gradient checks -----------------------------------------------------------------


@pytest.fixture(scope="module")
def cond_decoder64(ae):
    torch.manual_seed(2)
    dc = ConditionalDecoder.from_autoencoder(ae).double()
    with torch.no_grad():
        for conv in dc.fusions:
            conv.weight.normal_(0, 0.05)
            conv.bias.normal_(0, 0.05)
    return dc


def test_gradcheck_fusion_convs(cond_decoder64):
    z = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    c = torch.randn(1, 3, 16, 16, dtype=torch.float64)
    loss = l1_far_from_kink(lambda: cond_decoder64(z, c), (1, 16, 16), 0)
    params = [p for conv in cond_decoder64.fusions for p in conv.parameters()]
    assert directional_fd_check(loss, params) <= 1e-4


def test_gradcheck_condition_branch(cond_decoder64):
    z = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    c = torch.randn(1, 3, 16, 16, dtype=torch.float64)
    loss = l1_far_from_kink(lambda: cond_decoder64(z, c), (1, 16, 16), 1)
    params = list(cond_decoder64.condition.parameters())
    assert directional_fd_check(loss, params, seed=1) <= 1e-4


def test_gradcheck_denoiser():
    torch.manual_seed(3)
    net = Denoiser(DenoiserConfig(width=8, temb_dim=16)).double()
    x = torch.randn(2, 8, 4, 4, dtype=torch.float64)
    t = torch.tensor([3, 90])
    loss = l1_far_from_kink(lambda: net(x, t), (2, 4, 4, 4), 2)
    assert directional_fd_check(loss, list(net.parameters()), seed=2) <= 1e-4


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, ae, den):
    for builder in (build_late_fusion, build_early_fusion_frozen, build_early_fusion_conditional_encoder, build_unconditional):
        m = builder(ae, den, TOY)
        save_model(tmp_path / "m.ckpt", m, seed=3, step=10, extra={"note": "x"})
        back, manifest, optim = load_model(tmp_path / "m.ckpt")
        assert back.variant == m.variant and manifest["step"] == 10 and manifest["extra"] == {"note": "x"}
        assert optim == {}
        assert state_hash(back) == state_hash(m)
        x, c = torch.randn(1, 3, 64, 64), torch.randn(1, 3, 64, 64)
        with torch.no_grad():
            assert torch.equal(back.eval()(x, c), m.eval()(x, c))


def test_checkpoint_bytes_are_reproducible(tmp_path, ae):
    save_autoencoder(tmp_path / "a.ckpt", ae, seed=0, step=1)
    save_autoencoder(tmp_path / "b.ckpt", ae, seed=0, step=1)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    back, manifest = load_autoencoder(tmp_path / "a.ckpt")
    assert manifest["kind"] == "autoencoder" and state_hash(back) == state_hash(ae)
    with pytest.raises(ValueError):
        load_model(tmp_path / "a.ckpt")


def test_array_store_round_trip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b/c": np.ones(4, np.float32)}
    save_arrays(tmp_path / "x.ckpt", arrays, {"kind": "test"})
    back, manifest = load_arrays(tmp_path / "x.ckpt")
    assert manifest["kind"] == "test" and manifest["format_version"] >= 1
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
