"""Architecture contracts: shapes, modulation math, freezing, serialization."""

import numpy as np
import pytest
import torch

from hrssr import models
from oracles import check_gradients


def _img(b, c, h, w, seed=0):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.random((b, c, h, w), dtype=np.float32))


def _tiny_cfg(**over):
    base = dict(scale=4, embed_dim=32, e_deg_channels=16, e_deg_blocks=4,
                e_deg_reduce_every=4, e_img_channels=16, e_img_blocks=3,
                recon_channels=16, recon_blocks=2, init_seed=0)
    base.update(over)
    return models.LrnConfig(**base)


# ---------- degradation encoder ----------

def test_e_deg_embedding_shape():
    enc = models.build_e_deg(_tiny_cfg())
    e = enc(_img(5, 3, 16, 16))
    assert e.shape == (5, 32)
    single = enc(_img(1, 3, 16, 16)[0])
    assert single.shape == (32,)


def test_e_deg_gradient_matches_finite_differences():
    enc = models.build_e_deg(_tiny_cfg()).double()
    x = _img(1, 3, 8, 8, seed=4).double().requires_grad_(True)
    check_gradients(lambda: enc(x).pow(2).sum(), [x],
                    n_coords=10, h=1e-4, tol=1e-3, seed=1)


def test_e_deg_builder_deterministic():
    a = models.build_e_deg(_tiny_cfg())
    b = models.build_e_deg(_tiny_cfg())
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


# ---------- image encoder ----------

def test_e_img_keeps_resolution():
    enc = models.build_e_img(_tiny_cfg())
    f = enc(_img(2, 3, 24, 20))
    assert f.shape == (2, 16, 24, 20)


def test_e_img_gradient_matches_finite_differences():
    enc = models.build_e_img(_tiny_cfg()).double()
    x = _img(1, 3, 8, 8, seed=5).double().requires_grad_(True)
    check_gradients(lambda: enc(x).pow(2).mean(), [x],
                    n_coords=10, h=1e-4, tol=1e-3, seed=2)


# ---------- modulated convolution ----------

def test_modulated_conv_matches_brute_force():
    # Oracle: explicit loops for modulation, demodulation, and the 3x3
    # correlation at the center of a 3x3 input.
    torch.manual_seed(0)
    conv = models.ModulatedConv2d(2, 3, embed_dim=4)
    x = torch.randn(1, 2, 3, 3)
    emb = torch.randn(1, 4)
    out = conv(x, emb)

    w = conv.weight.detach().numpy()
    bias = conv.bias.detach().numpy()
    style = conv.affine(emb).detach().numpy()[0]
    eps = conv.eps
    xn = x.numpy()[0]
    expect = np.zeros(3)
    for o in range(3):
        wmod = w[o] * style[:, None, None]
        denom = np.sqrt((w[o] * style[:, None, None] ** 1).__pow__(2).sum() + eps)
        acc = 0.0
        for i in range(2):
            for dy in range(3):
                for dx in range(3):
                    acc += xn[i, dy, dx] * wmod[i, dy, dx] / denom
        expect[o] = acc + bias[o]
    got = out[0, :, 1, 1].detach().numpy()
    assert np.allclose(got, expect, atol=1e-5), (got, expect)


def test_modulated_conv_per_sample_styles_differ():
    torch.manual_seed(1)
    conv = models.ModulatedConv2d(4, 4, embed_dim=8)
    x = _img(2, 4, 6, 6, seed=8)
    emb = torch.randn(2, 8)
    out = conv(x, emb)
    swapped = conv(x, emb.flip(0))
    assert not torch.allclose(out, swapped)


# ---------- reconstructor ----------

def test_reconstructor_output_scale():
    cfg = _tiny_cfg()
    recon = models.build_reconstructor(cfg)
    feat = _img(2, 16, 32, 32, seed=2)
    emb = torch.randn(2, 32)
    out = recon(emb, feat)
    assert out.shape == (2, 3, 8, 8)


def test_reconstructor_scale_one():
    recon = models.build_reconstructor(_tiny_cfg(scale=1))
    out = recon(torch.randn(1, 32), _img(1, 16, 16, 16))
    assert out.shape == (1, 3, 16, 16)


def test_reconstructor_invalid_scale():
    with pytest.raises(ValueError):
        models.build_reconstructor(_tiny_cfg(scale=3))


def test_reconstructor_zero_embedding_finite():
    recon = models.build_reconstructor(_tiny_cfg())
    out = recon(torch.zeros(1, 32), _img(1, 16, 16, 16, seed=3))
    assert torch.isfinite(out).all()


def test_reconstructor_embedding_changes_output():
    recon = models.build_reconstructor(_tiny_cfg())
    feat = _img(1, 16, 16, 16, seed=6)
    torch.manual_seed(3)
    e1, e2 = torch.randn(1, 32), torch.randn(1, 32)
    diff = (recon(e1, feat) - recon(e2, feat)).norm().item()
    assert diff > 0.0


def test_reconstructor_gradient_through_modulation():
    cfg = _tiny_cfg(recon_blocks=1, recon_channels=8, embed_dim=8,
                    e_img_channels=8, scale=2)
    recon = models.build_reconstructor(cfg).double()
    feat = _img(1, 8, 8, 8, seed=7).double()
    emb = torch.randn(1, 8, dtype=torch.float64).requires_grad_(True)
    check_gradients(lambda: recon(emb, feat).pow(2).mean(), [emb],
                    n_coords=8, h=1e-4, tol=1e-3, seed=3)


# ---------- SR model ----------

def test_sr_model_shapes():
    sr = models.build_sr_model(models.SrConfig(scale=4, channels=16,
                                               num_blocks=2))
    out = sr(_img(2, 3, 8, 10))
    assert out.shape == (2, 3, 32, 40)
    single = sr(_img(1, 3, 8, 8)[0])
    assert single.shape == (3, 32, 32)


def test_sr_model_starts_near_interpolation():
    sr = models.build_sr_model(models.SrConfig(scale=2, channels=16,
                                               num_blocks=2))
    x = _img(1, 3, 12, 12, seed=9)
    base = torch.nn.functional.interpolate(x, scale_factor=2, mode="bicubic",
                                           align_corners=False)
    assert (sr(x) - base).abs().mean().item() < 0.2


def test_sr_model_deterministic_eval():
    sr = models.build_sr_model(models.SrConfig(scale=2, channels=16,
                                               num_blocks=2))
    x = _img(1, 3, 9, 9, seed=10)
    assert torch.equal(sr(x), sr(x))


# ---------- reference encoders ----------

def test_fallback_reference_fixed_and_frozen():
    a = models.build_reference_encoder("fallback", seed=77)
    b = models.build_reference_encoder("fallback", seed=77)
    x = _img(1, 3, 32, 32, seed=11)
    assert torch.equal(a(x), b(x))
    assert all(not p.requires_grad for p in a.parameters())
    f = a(x)
    assert f.shape == (1, 128, 4, 4)


def test_fallback_reference_grad_reaches_input():
    enc = models.build_reference_encoder("fallback")
    x = _img(1, 3, 16, 16, seed=12).requires_grad_(True)
    enc(x).pow(2).mean().backward()
    assert x.grad is not None and x.grad.abs().sum() > 0
    assert all(p.grad is None for p in enc.parameters())


def test_fallback_reference_input_gradient_finite_diff():
    enc = models.build_reference_encoder("fallback").double()
    x = _img(1, 3, 16, 16, seed=13).double().requires_grad_(True)
    check_gradients(lambda: enc(x).pow(2).mean(), [x],
                    n_coords=10, h=1e-4, tol=1e-3, seed=4)


def test_clip_reference_requires_weights(tmp_path):
    with pytest.raises(FileNotFoundError):
        models.build_reference_encoder("clip", weights_path=tmp_path / "w.pt")
    with pytest.raises(FileNotFoundError):
        models.build_reference_encoder("clip", weights_path=None)


def test_clip_reference_loads_trunk_state(tmp_path):
    torch.manual_seed(0)
    donor = models.ClipResNetTrunk()
    path = tmp_path / "trunk.pt"
    torch.save({"visual." + k: v for k, v in donor.state_dict().items()}, path)
    enc = models.build_reference_encoder("clip", weights_path=path)
    x = _img(1, 3, 64, 64, seed=14)
    f = enc(x)
    assert f.shape == (1, 1024, 4, 4)
    assert all(not p.requires_grad for p in enc.parameters())


def test_clip_reference_rejects_wrong_file(tmp_path):
    path = tmp_path / "junk.pt"
    torch.save({"unrelated.weight": torch.zeros(3)}, path)
    with pytest.raises(ValueError):
        models.build_reference_encoder("clip", weights_path=path)


def test_unknown_reference_mode():
    with pytest.raises(ValueError):
        models.build_reference_encoder("resnet")


# ---------- freezing ----------

def test_freeze_shallow_fraction_zero_head_only():
    sr = models.build_sr_model(models.SrConfig(channels=8, num_blocks=10))
    n = models.freeze_shallow(sr, 0.0)
    assert n == 2  # head conv weight + bias
    assert all(not p.requires_grad for p in sr.head.parameters())
    assert all(p.requires_grad for p in sr.blocks[0].parameters())


def test_freeze_shallow_fraction_point_two():
    sr = models.build_sr_model(models.SrConfig(channels=8, num_blocks=10))
    models.freeze_shallow(sr, 0.2)
    for i, blk in enumerate(sr.blocks):
        frozen = all(not p.requires_grad for p in blk.parameters())
        assert frozen == (i < 2), i


def test_freeze_shallow_full_freeze_degenerate():
    sr = models.build_sr_model(models.SrConfig(channels=8, num_blocks=4))
    models.freeze_shallow(sr, 1.0)
    assert all(not p.requires_grad for p in sr.parameters())
    trainable = [p for p in sr.parameters() if p.requires_grad]
    assert trainable == []


def test_freeze_shallow_bad_fraction():
    sr = models.build_sr_model(models.SrConfig(channels=8, num_blocks=4))
    with pytest.raises(ValueError):
        models.freeze_shallow(sr, 1.5)


def test_freeze_shallow_requires_block_structure():
    with pytest.raises(TypeError):
        models.freeze_shallow(torch.nn.Linear(2, 2), 0.2)


# ---------- serialization ----------

def test_checkpoint_round_trip_exact(tmp_path):
    enc = models.build_e_deg(_tiny_cfg())
    payload = {"kind": "e_deg", "state": enc.state_dict(), "step": 123}
    path = tmp_path / "ck.pt"
    models.save_checkpoint(payload, path)
    back = models.load_checkpoint(path)
    assert back["step"] == 123
    for k, v in enc.state_dict().items():
        assert torch.equal(back["state"][k], v)
    assert models.hash_state_dict(back["state"]) == models.hash_state_dict(
        enc.state_dict())


def test_checkpoint_missing_file():
    with pytest.raises(FileNotFoundError):
        models.load_checkpoint("/nope/never.pt")


def test_hash_state_dict_detects_change():
    enc = models.build_e_deg(_tiny_cfg())
    h1 = models.hash_state_dict(enc.state_dict())
    with torch.no_grad():
        enc.fc.bias.add_(1e-3)
    assert models.hash_state_dict(enc.state_dict()) != h1
