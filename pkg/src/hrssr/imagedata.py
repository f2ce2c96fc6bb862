"""Image I/O, luma conversion, bicubic resampling, patch cropping, and the
high-frequency weight map used to focus reconstruction losses on detail.

All in-memory images are torch float32 tensors of shape (C, H, W) with
values in [0, 1], channel-major, C in {1, 3}. Files on disk are 8-bit.
"""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image

_EPS = 1e-12


def _check_chw(img: torch.Tensor) -> torch.Tensor:
    if not isinstance(img, torch.Tensor):
        raise ValueError(f"expected a torch.Tensor, got {type(img).__name__}")
    if img.dim() != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected (C,H,W) with C in {{1,3}}, got {tuple(img.shape)}")
    if img.shape[1] < 1 or img.shape[2] < 1:
        raise ValueError(f"zero-sized image: {tuple(img.shape)}")
    return img


def load_image(path) -> torch.Tensor:
    """Read an 8-bit image file into a float32 (C,H,W) tensor in [0,1]."""
    try:
        with Image.open(path) as im:
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.float32)[None]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32)
                arr = arr.transpose(2, 0, 1)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise OSError(f"cannot decode image file {path}: {exc}") from exc
    if arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ValueError(f"zero-sized image: {path}")
    return torch.from_numpy(arr / 255.0)


def save_image(img: torch.Tensor, path, quality: int = 95) -> None:
    """Quantize a (C,H,W) [0,1] tensor to 8-bit and write it to path.

    PNG round-trips within one quantization step; JPEG is lossy.
    """
    img = _check_chw(img)
    arr = img.detach().cpu().clamp(0.0, 1.0).numpy()
    bytes_ = np.rint(arr * 255.0).astype(np.uint8)
    if bytes_.shape[0] == 1:
        pil = Image.fromarray(bytes_[0], mode="L")
    else:
        pil = Image.fromarray(bytes_.transpose(1, 2, 0), mode="RGB")
    suffix = str(path).lower()
    if suffix.endswith((".jpg", ".jpeg")):
        pil.save(path, quality=quality)
    else:
        pil.save(path)


def quantize_byte(value: float) -> int:
    """8-bit code for one [0,1] sample, same rounding as save_image."""
    return int(np.rint(np.clip(value, 0.0, 1.0) * 255.0))


def rgb_to_y(img: torch.Tensor) -> torch.Tensor:
    """Luma plane (H,W): 0.299 R + 0.587 G + 0.114 B. Grayscale passes through."""
    img = _check_chw(img)
    if img.shape[0] == 1:
        return img[0]
    r, g, b = img[0], img[1], img[2]
    return 0.299 * r + 0.587 * g + 0.114 * b


def bicubic_resize(img: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Catmull-Rom bicubic resample to (target_h, target_w), clamped to [0,1].

    Downscaling widens the kernel support by the scale factor (antialiasing).
    """
    img = _check_chw(img)
    if target_h < 1 or target_w < 1:
        raise ValueError(f"invalid target size ({target_h}, {target_w})")
    c, h, w = img.shape
    if (h, w) == (target_h, target_w):
        return img.detach().clamp(0.0, 1.0).clone()
    arr = img.detach().cpu().numpy().astype(np.float32)
    out = np.empty((c, target_h, target_w), dtype=np.float32)
    for k in range(c):
        plane = Image.fromarray(arr[k], mode="F")
        out[k] = np.asarray(
            plane.resize((target_w, target_h), resample=Image.Resampling.BICUBIC),
            dtype=np.float32,
        )
    return torch.from_numpy(out).clamp(0.0, 1.0)


def upsample_like(lr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    """Bicubic-upsample lr to the spatial size of hr."""
    _check_chw(hr)
    return bicubic_resize(lr, hr.shape[1], hr.shape[2])


def crop_patch(img: torch.Tensor, top: int, left: int, size: int) -> torch.Tensor:
    """Axis-aligned square crop; the window must lie inside the image."""
    img = _check_chw(img)
    _, h, w = img.shape
    if size < 1:
        raise ValueError(f"invalid patch size {size}")
    if top < 0 or left < 0 or top + size > h or left + size > w:
        raise ValueError(
            f"patch ({top},{left},{size}) exceeds image bounds ({h},{w})"
        )
    return img[:, top : top + size, left : left + size]


def random_patch_coords(h: int, w: int, size: int, rng: np.random.Generator):
    """Uniform top-left corner for a size x size window inside (h, w)."""
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image ({h},{w})")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return top, left


def crop_aligned_pair(lr: torch.Tensor, hr: torch.Tensor, top: int, left: int,
                      size: int, scale: int):
    """Crop matching LR/HR windows; HR coordinates are the LR ones times scale."""
    lr_patch = crop_patch(lr, top, left, size)
    hr_patch = crop_patch(hr, top * scale, left * scale, size * scale)
    return lr_patch, hr_patch


def hf_weight_map(img: torch.Tensor) -> torch.Tensor:
    """Per-pixel detail weight in [0,1] from a one-level 2x2 Haar transform.

    The three detail bands are summed in magnitude over channels and blocks,
    normalized by the maximum, and nearest-neighbor upsampled back to (H,W).
    A constant image yields an all-zero map. Odd sizes are edge-padded to
    even before the block transform; the output is cropped back.
    """
    img = _check_chw(img).detach()
    _, h, w = img.shape
    x = img
    pad_h = h % 2
    pad_w = w % 2
    if pad_h or pad_w:
        x = torch.nn.functional.pad(x[None], (0, pad_w, 0, pad_h), mode="replicate")[0]
    a = x[:, 0::2, 0::2]
    b = x[:, 0::2, 1::2]
    c = x[:, 1::2, 0::2]
    d = x[:, 1::2, 1::2]
    # Orthonormal 2x2 Haar details: vertical, horizontal, diagonal.
    hl = (a - b + c - d) * 0.5
    lh = (a + b - c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    detail = (hl.abs() + lh.abs() + hh.abs()).sum(dim=0)
    peak = detail.max()
    if peak <= _EPS:
        return torch.zeros(h, w, dtype=img.dtype)
    detail = detail / peak
    up = detail.repeat_interleave(2, dim=0).repeat_interleave(2, dim=1)
    return up[:h, :w].contiguous()
