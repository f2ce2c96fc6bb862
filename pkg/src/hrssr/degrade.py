"""Two-round synthetic degradation sampling and application.

Each round independently includes, with probability 0.5 each and in the
fixed order blur -> gaussian noise -> poisson noise -> jpeg, one stage of
each kind with parameters drawn uniformly from the ranges below. After the
rounds the image is bicubic-downsampled by the scale factor. A recipe is
fully determined by its seed, so synthesized datasets are reproducible
byte for byte.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .imagedata import bicubic_resize, load_image, save_image

BLUR_SIGMA_RANGE = (0.2, 3.0)
NOISE_SIGMA_RANGE = (0.0, 25.0 / 255.0)
POISSON_SCALE_RANGE = (0.05, 3.0)
JPEG_QUALITY_RANGE = (30, 95)
STAGE_PROB = 0.5
NUM_ROUNDS = 2
STAGE_ORDER = ("blur", "gaussian_noise", "poisson_noise", "jpeg")

VALID_SCALES = (1, 2, 4)


@dataclass(frozen=True)
class DegradationStage:
    kind: str
    param: float


@dataclass
class DegradationRecipe:
    """Concrete degradation plan: staged rounds, downsample factor, noise seed."""

    rounds: list[list[DegradationStage]]
    scale: int
    rng_seed: int

    def stage_kinds(self) -> list[str]:
        return [s.kind for r in self.rounds for s in r]


def sample_recipe(seed: int, scale: int) -> DegradationRecipe:
    """Draw a two-round recipe from the fixed parameter ranges."""
    if scale not in VALID_SCALES:
        raise ValueError(f"scale must be one of {VALID_SCALES}, got {scale}")
    rng = np.random.default_rng(seed)
    rounds = []
    for _ in range(NUM_ROUNDS):
        stages = []
        for kind in STAGE_ORDER:
            include = rng.random() < STAGE_PROB
            if kind == "blur":
                param = rng.uniform(*BLUR_SIGMA_RANGE)
            elif kind == "gaussian_noise":
                param = rng.uniform(*NOISE_SIGMA_RANGE)
            elif kind == "poisson_noise":
                param = rng.uniform(*POISSON_SCALE_RANGE)
            else:
                param = float(rng.integers(JPEG_QUALITY_RANGE[0],
                                           JPEG_QUALITY_RANGE[1] + 1))
            if include:
                stages.append(DegradationStage(kind, float(param)))
        rounds.append(stages)
    return DegradationRecipe(rounds=rounds, scale=scale,
                             rng_seed=int(np.random.default_rng(seed ^ 0x9E3779B9).integers(0, 2**63)))


def gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable convolution with a sampled, normalized Gaussian kernel.

    Kernel radius is ceil(3*sigma); borders are reflected.
    """
    if sigma <= 0:
        return img.clone()
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = torch.arange(-radius, radius + 1, dtype=torch.float32)
    k = torch.exp(-(xs * xs) / (2.0 * sigma * sigma))
    k = k / k.sum()
    c = img.shape[0]
    x = img[None]
    kh = k.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    kv = k.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    x = F.pad(x, (radius, radius, 0, 0), mode="reflect")
    x = F.conv2d(x, kh, groups=c)
    x = F.pad(x, (0, 0, radius, radius), mode="reflect")
    x = F.conv2d(x, kv, groups=c)
    return x[0]


def gaussian_noise(img: torch.Tensor, sigma: float,
                   rng: np.random.Generator) -> torch.Tensor:
    noise = rng.standard_normal(tuple(img.shape)).astype(np.float32) * sigma
    return (img + torch.from_numpy(noise)).clamp(0.0, 1.0)


def poisson_noise(img: torch.Tensor, scale: float,
                  rng: np.random.Generator) -> torch.Tensor:
    """Shot noise: counts drawn at brightness img*255*scale, renormalized."""
    lam = img.clamp(0.0, 1.0).numpy().astype(np.float64) * 255.0 * scale
    counts = rng.poisson(lam).astype(np.float32)
    out = torch.from_numpy(counts / (255.0 * scale))
    return out.clamp(0.0, 1.0)


def jpeg_compress(img: torch.Tensor, quality: int) -> torch.Tensor:
    """Round-trip through a real JPEG codec at the given quality."""
    quality = int(quality)
    if not 1 <= quality <= 100:
        raise ValueError(f"jpeg quality out of range: {quality}")
    arr = np.rint(img.clamp(0.0, 1.0).numpy() * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        pil = Image.fromarray(arr[0], mode="L")
    else:
        pil = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    back = np.asarray(Image.open(buf), dtype=np.float32) / 255.0
    if back.ndim == 2:
        back = back[None]
    else:
        back = back.transpose(2, 0, 1)
    return torch.from_numpy(back.copy())


def apply_recipe(img: torch.Tensor, recipe: DegradationRecipe) -> torch.Tensor:
    """Run the staged rounds then downsample; deterministic given the recipe."""
    c, h, w = img.shape
    if h % recipe.scale or w % recipe.scale:
        raise ValueError(
            f"image ({h},{w}) not divisible by scale {recipe.scale}")
    rng = np.random.default_rng(recipe.rng_seed)
    x = img.clamp(0.0, 1.0)
    for stages in recipe.rounds:
        for stage in stages:
            if stage.kind == "blur":
                x = gaussian_blur(x, stage.param).clamp(0.0, 1.0)
            elif stage.kind == "gaussian_noise":
                x = gaussian_noise(x, stage.param, rng)
            elif stage.kind == "poisson_noise":
                x = poisson_noise(x, stage.param, rng)
            elif stage.kind == "jpeg":
                x = jpeg_compress(x, int(stage.param))
            else:
                raise ValueError(f"unknown degradation stage {stage.kind!r}")
    if recipe.scale > 1:
        x = bicubic_resize(x, h // recipe.scale, w // recipe.scale)
    return x.clamp(0.0, 1.0)


# Named single-stage corpora used by the alignment-shift ablation.
SHIFT_PRESETS = {
    "blur2": DegradationStage("blur", 2.0),
    "noise15": DegradationStage("gaussian_noise", 15.0 / 255.0),
    "jpeg40": DegradationStage("jpeg", 40.0),
}


def apply_preset(img: torch.Tensor, name: str, seed: int = 0) -> torch.Tensor:
    """Apply one named degradation stage at full resolution."""
    if name not in SHIFT_PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(SHIFT_PRESETS)}")
    stage = SHIFT_PRESETS[name]
    recipe = DegradationRecipe(rounds=[[stage]], scale=1, rng_seed=seed)
    return apply_recipe(img, recipe)


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def list_images(dirpath) -> list[Path]:
    root = Path(dirpath)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory not found: {root}")
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def synth_dataset(hr_dir, out_dir, scale: int, count: int, seed: int) -> Path:
    """Generate count LR images from the HR pool and write a manifest CSV.

    Sources are cycled in sorted order; every output gets an independent
    recipe seeded from (seed, index). HR copies are cropped to a multiple
    of the scale and stored next to the LR files so pairs always align.
    Returns the manifest path.
    """
    if scale not in VALID_SCALES:
        raise ValueError(f"scale must be one of {VALID_SCALES}, got {scale}")
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    sources = list_images(hr_dir)
    if count > 0 and not sources:
        raise FileNotFoundError(f"no images found in {hr_dir}")
    out_root = Path(out_dir)
    hr_out = out_root / "hr"
    lr_out = out_root / "lr"
    hr_out.mkdir(parents=True, exist_ok=True)
    lr_out.mkdir(parents=True, exist_ok=True)
    manifest_path = out_root / "manifest.csv"
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hr_path", "lr_path", "scale", "recipe_seed"])
        for i in range(count):
            src = sources[i % len(sources)]
            recipe_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
            recipe = sample_recipe(recipe_seed, scale)
            hr = load_image(src)
            _, h, w = hr.shape
            hr = hr[:, : (h // scale) * scale, : (w // scale) * scale]
            if hr.shape[1] < scale or hr.shape[2] < scale:
                raise ValueError(f"source {src} smaller than one LR pixel")
            lr = apply_recipe(hr, recipe)
            name = f"{i:05d}_{src.stem}.png"
            save_image(hr, hr_out / name)
            save_image(lr, lr_out / name)
            # Paths are stored relative to the manifest so reruns are
            # byte-identical and the dataset can be moved wholesale.
            writer.writerow([f"hr/{name}", f"lr/{name}", scale, recipe_seed])
    return manifest_path


def synth_bicubic_dataset(hr_dir, out_dir, scale: int) -> Path:
    """Degradation-free companion to synth_dataset: LR images are plain
    bicubic downscales of every HR source. Used for supervised SR-model
    pretraining where the pipeline noise would only hurt."""
    if scale not in VALID_SCALES:
        raise ValueError(f"scale must be one of {VALID_SCALES}, got {scale}")
    sources = list_images(hr_dir)
    if not sources:
        raise FileNotFoundError(f"no images found in {hr_dir}")
    out_root = Path(out_dir)
    hr_out = out_root / "hr"
    lr_out = out_root / "lr"
    hr_out.mkdir(parents=True, exist_ok=True)
    lr_out.mkdir(parents=True, exist_ok=True)
    manifest_path = out_root / "manifest.csv"
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hr_path", "lr_path", "scale", "recipe_seed"])
        for i, src in enumerate(sources):
            hr = load_image(src)
            _, h, w = hr.shape
            hr = hr[:, : (h // scale) * scale, : (w // scale) * scale]
            if hr.shape[1] < scale or hr.shape[2] < scale:
                raise ValueError(f"source {src} smaller than one LR pixel")
            lr = bicubic_resize(hr, hr.shape[1] // scale, hr.shape[2] // scale)
            name = f"{i:05d}_{src.stem}.png"
            save_image(hr, hr_out / name)
            save_image(lr, lr_out / name)
            writer.writerow([f"hr/{name}", f"lr/{name}", scale, 0])
    return manifest_path


def read_manifest(path) -> list[dict]:
    """Parse a manifest CSV; relative paths resolve against its directory."""
    rows = []
    base = Path(path).parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"hr_path", "lr_path", "scale", "recipe_seed"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValueError(f"manifest {path} missing columns {required}")
        for row in reader:
            hr_path = Path(row["hr_path"])
            lr_path = Path(row["lr_path"])
            rows.append({
                "hr_path": str(hr_path if hr_path.is_absolute() else base / hr_path),
                "lr_path": str(lr_path if lr_path.is_absolute() else base / lr_path),
                "scale": int(row["scale"]),
                "recipe_seed": int(row["recipe_seed"]),
            })
    return rows
