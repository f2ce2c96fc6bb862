"""Degradation stages, recipe sampling statistics, dataset synthesis."""

import csv
import hashlib
from pathlib import Path

import numpy as np
import pytest
import torch

from hrssr import degrade, imagedata
from oracles import gaussian_peak_2d


def _texture(seed=0, c=3, h=64, w=64):
    rng = np.random.default_rng(seed)
    img = rng.random((c, h, w), dtype=np.float32)
    return torch.from_numpy(img)


# ---------- individual stages ----------

def test_blur_delta_matches_sampled_kernel_peak():
    # Oracle: center tap of the sampled normalized Gaussian, radius ceil(3*sigma).
    img = torch.zeros(1, 9, 9)
    img[0, 4, 4] = 1.0
    out = degrade.gaussian_blur(img, 1.0)
    assert abs(out[0, 4, 4].item() - gaussian_peak_2d(1.0, 3)) <= 1e-4


def test_blur_preserves_interior_mean():
    img = _texture(1, h=48, w=48)
    out = degrade.gaussian_blur(img, 1.5)
    interior = slice(8, 40)
    assert abs(out[:, interior, interior].mean().item()
               - img[:, interior, interior].mean().item()) <= 1e-3


def test_blur_zero_sigma_identity():
    img = _texture(2)
    assert torch.equal(degrade.gaussian_blur(img, 0.0), img)


def test_gaussian_noise_statistics():
    img = torch.full((3, 64, 64), 0.5)
    out = degrade.gaussian_noise(img, 10.0 / 255.0, np.random.default_rng(3))
    resid = (out - img).numpy()
    assert abs(resid.mean()) <= 2e-3
    assert abs(resid.std() - 10.0 / 255.0) <= 2e-3


def test_poisson_noise_scale_controls_strength():
    # Count renormalization keeps the mean; higher scale means lower variance.
    img = torch.full((3, 64, 64), 0.5)
    weak = degrade.poisson_noise(img, 3.0, np.random.default_rng(1))
    strong = degrade.poisson_noise(img, 0.05, np.random.default_rng(1))
    assert abs(weak.mean().item() - 0.5) <= 5e-3
    theory_weak = (0.5 / (255.0 * 3.0)) ** 0.5
    assert abs(weak.std().item() - theory_weak) <= 2e-3
    assert strong.std().item() > weak.std().item() * 3


def test_jpeg_quality_orders_error():
    img = degrade.gaussian_blur(_texture(5), 1.0)  # compressible content
    hi = degrade.jpeg_compress(img, 95)
    lo = degrade.jpeg_compress(img, 30)
    err_hi = (hi - img).abs().mean().item()
    err_lo = (lo - img).abs().mean().item()
    assert err_hi < err_lo
    assert hi.shape == img.shape
    assert hi.min() >= 0.0 and hi.max() <= 1.0


def test_jpeg_deterministic():
    img = _texture(6)
    a = degrade.jpeg_compress(img, 50)
    b = degrade.jpeg_compress(img, 50)
    assert torch.equal(a, b)


def test_jpeg_rejects_bad_quality():
    with pytest.raises(ValueError):
        degrade.jpeg_compress(_texture(0), 0)


# ---------- recipes ----------

def test_recipe_sampling_deterministic():
    a = degrade.sample_recipe(123, 4)
    b = degrade.sample_recipe(123, 4)
    assert a == b


def test_recipe_two_rounds_fixed_order():
    order = {k: i for i, k in enumerate(degrade.STAGE_ORDER)}
    for seed in range(50):
        r = degrade.sample_recipe(seed, 2)
        assert len(r.rounds) == 2
        for stages in r.rounds:
            kinds = [s.kind for s in stages]
            assert kinds == sorted(kinds, key=order.__getitem__)


def test_recipe_parameter_ranges():
    for seed in range(200):
        r = degrade.sample_recipe(seed, 4)
        for stage in (s for rnd in r.rounds for s in rnd):
            if stage.kind == "blur":
                lo, hi = degrade.BLUR_SIGMA_RANGE
            elif stage.kind == "gaussian_noise":
                lo, hi = degrade.NOISE_SIGMA_RANGE
            elif stage.kind == "poisson_noise":
                lo, hi = degrade.POISSON_SCALE_RANGE
            else:
                lo, hi = degrade.JPEG_QUALITY_RANGE
            assert lo <= stage.param <= hi


def test_recipe_inclusion_frequency_monte_carlo():
    # Oracle: inclusion probability 0.5 per stage kind per round; over the
    # 2000 rounds from seeds 1..1000 the observed rate must sit within 5%.
    counts = {k: 0 for k in degrade.STAGE_ORDER}
    rounds = 0
    for seed in range(1, 1001):
        r = degrade.sample_recipe(seed, 4)
        for stages in r.rounds:
            rounds += 1
            for s in stages:
                counts[s.kind] += 1
    assert rounds == 2000
    for kind, n in counts.items():
        assert abs(n / rounds - 0.5) <= 0.05, (kind, n / rounds)


def test_recipe_rejects_bad_scale():
    with pytest.raises(ValueError):
        degrade.sample_recipe(0, 3)


# ---------- apply ----------

def test_apply_recipe_shape_and_range():
    img = _texture(7, h=64, w=48)
    r = degrade.sample_recipe(11, 4)
    out = degrade.apply_recipe(img, r)
    assert out.shape == (3, 16, 12)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_apply_recipe_deterministic():
    img = _texture(8)
    r = degrade.sample_recipe(21, 2)
    assert torch.equal(degrade.apply_recipe(img, r),
                       degrade.apply_recipe(img, r))


def test_apply_recipe_divisibility_error():
    img = _texture(9, h=63, w=64)
    r = degrade.sample_recipe(2, 4)
    with pytest.raises(ValueError):
        degrade.apply_recipe(img, r)


def test_apply_recipe_scale_one_keeps_size():
    img = _texture(10, h=32, w=32)
    r = degrade.sample_recipe(5, 1)
    assert degrade.apply_recipe(img, r).shape == img.shape


def test_presets():
    img = _texture(12, h=32, w=32)
    for name in ("blur2", "noise15", "jpeg40"):
        out = degrade.apply_preset(img, name)
        assert out.shape == img.shape
        assert not torch.equal(out, img)
    with pytest.raises(ValueError):
        degrade.apply_preset(img, "sharpen")


# ---------- dataset synthesis ----------

def _make_hr_pool(root: Path, n=3, size=32):
    root.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        imagedata.save_image(_texture(100 + i, h=size, w=size), root / f"img{i}.png")


def _dir_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_dataset_manifest_and_determinism(tmp_path):
    hr = tmp_path / "pool"
    _make_hr_pool(hr)
    out1 = tmp_path / "d1"
    out2 = tmp_path / "d2"
    m1 = degrade.synth_dataset(hr, out1, scale=4, count=5, seed=77)
    degrade.synth_dataset(hr, out2, scale=4, count=5, seed=77)
    rows = degrade.read_manifest(m1)
    assert len(rows) == 5
    for row in rows:
        assert Path(row["hr_path"]).exists()
        assert Path(row["lr_path"]).exists()
        assert row["scale"] == 4
        hr_img = imagedata.load_image(row["hr_path"])
        lr_img = imagedata.load_image(row["lr_path"])
        assert hr_img.shape[1] == lr_img.shape[1] * 4
        assert hr_img.shape[2] == lr_img.shape[2] * 4
    assert _dir_digest(out1) == _dir_digest(out2)


def test_synth_dataset_zero_count(tmp_path):
    hr = tmp_path / "pool"
    _make_hr_pool(hr)
    m = degrade.synth_dataset(hr, tmp_path / "empty", scale=2, count=0, seed=0)
    with open(m) as fh:
        rows = list(csv.reader(fh))
    assert rows == [["hr_path", "lr_path", "scale", "recipe_seed"]]
    assert not list((tmp_path / "empty" / "lr").iterdir())


def test_synth_dataset_missing_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        degrade.synth_dataset(tmp_path / "absent", tmp_path / "o", 2, 1, 0)


def test_manifest_rejects_missing_columns(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("hr_path,lr_path\na,b\n")
    with pytest.raises(ValueError):
        degrade.read_manifest(bad)
