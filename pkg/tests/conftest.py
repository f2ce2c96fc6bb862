"""Shared fixtures: a small procedural image corpus plus tiny pretrained
checkpoints reused by the training, benchmark, and CLI tests."""

import numpy as np
import pytest
import torch

from hrssr.degrade import gaussian_blur, synth_bicubic_dataset, synth_dataset
from hrssr.imagedata import save_image
from hrssr.models import LrnConfig, SrConfig
from hrssr.train import TrainConfig, pretrain, train_sr


def synth_toy_images(out_dir, count: int, size: int, seed: int) -> list:
    """Write procedurally generated RGB images: gradient background plus
    random soft rectangles and mild noise. Deterministic in seed."""
    rng = np.random.default_rng(seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    gx = np.linspace(0.0, 1.0, size, dtype=np.float32)[None, None, :]
    gy = np.linspace(0.0, 1.0, size, dtype=np.float32)[None, :, None]
    for i in range(count):
        base = rng.uniform(0.2, 0.8, size=(3, 1, 1)).astype(np.float32)
        img = base + 0.25 * float(rng.uniform(-1, 1)) * gx \
            + 0.25 * float(rng.uniform(-1, 1)) * gy
        img = np.broadcast_to(img, (3, size, size)).copy()
        for _ in range(6):
            h = int(rng.integers(size // 8, size // 2))
            w = int(rng.integers(size // 8, size // 2))
            top = int(rng.integers(0, size - h))
            left = int(rng.integers(0, size - w))
            color = rng.uniform(0.0, 1.0, size=(3, 1, 1)).astype(np.float32)
            img[:, top:top + h, left:left + w] = \
                0.5 * img[:, top:top + h, left:left + w] + 0.5 * color
        t = torch.from_numpy(img)
        t = gaussian_blur(t, 0.8)
        t = t + torch.from_numpy(
            rng.normal(0.0, 0.015, size=t.shape).astype(np.float32))
        t = t.clamp(0.0, 1.0)
        path = out_dir / f"toy_{i:03d}.png"
        save_image(t, path)
        paths.append(path)
    return paths


@pytest.fixture(scope="session")
def toy_hr_dir(tmp_path_factory):
    """Eight 48x48 source images shared across test modules."""
    root = tmp_path_factory.mktemp("toy_hr")
    synth_toy_images(root, count=8, size=48, seed=90)
    return root


@pytest.fixture(scope="session")
def tiny_lrn_cfg():
    return LrnConfig(scale=4, embed_dim=32, e_deg_channels=16, e_deg_blocks=4,
                     e_deg_reduce_every=2, e_img_channels=16, e_img_blocks=2,
                     recon_channels=16, recon_blocks=2, ref_channels=32,
                     init_seed=0)


@pytest.fixture(scope="session")
def tiny_sr_cfg():
    return SrConfig(scale=4, channels=12, num_blocks=2, init_seed=1)


@pytest.fixture(scope="session")
def toy_manifest(toy_hr_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_synth")
    return synth_dataset(toy_hr_dir, out, scale=4, count=8, seed=11)


@pytest.fixture(scope="session")
def toy_bicubic_manifest(toy_hr_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_bicubic")
    return synth_bicubic_dataset(toy_hr_dir, out, scale=4)


@pytest.fixture(scope="session")
def lr_pool(toy_manifest):
    # The LR half of the synthetic set doubles as an unpaired target corpus.
    return toy_manifest.parent / "lr"


@pytest.fixture(scope="session")
def pretrained_lrn(toy_manifest, tiny_lrn_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("lrn_run")
    # Short runs need a faster shadow decay or the EMA stays near init.
    cfg = TrainConfig.pretrain_defaults(seed=5, lr=1e-3, total_iters=40,
                                        batch_size=4, patch_size=16,
                                        ema_decay=0.9)
    return pretrain(cfg, toy_manifest, out, model_cfg=tiny_lrn_cfg)


@pytest.fixture(scope="session")
def pretrained_sr(toy_bicubic_manifest, tiny_sr_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("sr_run")
    cfg = TrainConfig(seed=3, lr=5e-4, total_iters=30, batch_size=4,
                      patch_size=16, ema_decay=0.9)
    return train_sr(cfg, toy_bicubic_manifest, out, sr_cfg=tiny_sr_cfg)
