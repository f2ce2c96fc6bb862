"""Fidelity and perceptual metrics plus the CSV evaluation report.

PSNR and SSIM are computed on the BT.601 luma plane. The perceptual
distance is a feature-space dissimilarity in [0, 1] that stays
differentiable with respect to both inputs; the default backend is a
fixed-seed random conv feature extractor so no pretrained weights are
required, with an optional learned-weights backend.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
from skimage.metrics import structural_similarity

from .imagedata import rgb_to_y

PSNR_CAP_DB = 100.0
_MSE_FLOOR = 1e-10
# Affine gain for the fallback distance: raw cosine dissimilarity of random
# conv features is ~0.2 for a 4x degraded/clean pair, so 2.5x spreads typical
# pairs across [0, 1] while identical inputs stay at 0.
_FALLBACK_GAIN = 2.5


class PerceptualBackendError(RuntimeError):
    """Requested perceptual backend cannot be constructed."""


def _pair_check(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB on the luma plane, capped at 100."""
    _pair_check(a, b)
    ya = rgb_to_y(a).double()
    yb = rgb_to_y(b).double()
    mse = float(((ya - yb) ** 2).mean())
    if mse <= _MSE_FLOOR:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Structural similarity on luma: 11x11 Gaussian window (sigma 1.5),
    stabilizers K1=0.01, K2=0.03, population statistics."""
    _pair_check(a, b)
    ya = rgb_to_y(a).cpu().numpy()
    yb = rgb_to_y(b).cpu().numpy()
    if min(ya.shape) < 11:
        raise ValueError(f"image {ya.shape} smaller than the 11x11 ssim window")
    return float(structural_similarity(
        ya, yb, data_range=1.0, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False, K1=0.01, K2=0.03,
    ))


class _RandomFeatureNet(nn.Module):
    """Frozen random conv pyramid; taps after each conv, smooth activations."""

    def __init__(self, channels=(16, 32, 64), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        in_ch = 3
        for out_ch in channels:
            conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (in_ch * 9) ** -0.5)
                conv.bias.zero_()
            convs.append(conv)
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for i, conv in enumerate(self.convs):
            x = conv(x)
            feats.append(x)
            if i + 1 < len(self.convs):
                x = torch.nn.functional.gelu(x)
        return feats


class PerceptualDistance:
    """Callable perceptual dissimilarity d(a, b) in [0, 1], 0 iff identical
    features; differentiable w.r.t. both inputs.

    backend "fallback": cosine similarity of fixed random conv features,
    averaged over space and layers, affinely mapped to [0, 1].
    backend "lpips": learned perceptual distance; requires the optional
    lpips package and its pretrained weights.
    """

    def __init__(self, backend: str = "fallback", seed: int = 1234):
        self.backend = backend
        if backend == "fallback":
            self._net = _RandomFeatureNet(seed=seed)
            self._lpips = None
        elif backend == "lpips":
            try:
                import lpips as _lpips_mod
                self._lpips = _lpips_mod.LPIPS(net="alex", verbose=False)
            except Exception as exc:
                raise PerceptualBackendError(
                    "lpips backend unavailable (package or pretrained weights "
                    "missing); use backend='fallback'"
                ) from exc
            self._lpips.eval()
            for p in self._lpips.parameters():
                p.requires_grad_(False)
            self._net = None
        else:
            raise ValueError(f"unknown perceptual backend {backend!r}")

    def _prep(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x[None]
        if x.shape[1] == 1:
            x = x.expand(x.shape[0], 3, *x.shape[2:])
        return x

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Returns a scalar tensor for (C,H,W) inputs, a (B,) tensor for batches."""
        _pair_check(a, b)
        squeeze = a.dim() == 3
        xa, xb = self._prep(a), self._prep(b)
        if self.backend == "lpips":
            d = self._lpips(xa * 2 - 1, xb * 2 - 1).reshape(-1)
            d = d.clamp(0.0, 1.0)
            return d[0] if squeeze else d
        if self._net.convs[0].weight.dtype != xa.dtype:
            self._net.to(xa.dtype)
        fa = self._net(xa)
        fb = self._net(xb)
        sims = []
        for ta, tb in zip(fa, fb):
            na = torch.nn.functional.normalize(ta, dim=1, eps=1e-8)
            nb = torch.nn.functional.normalize(tb, dim=1, eps=1e-8)
            sims.append((na * nb).sum(dim=1).mean(dim=(1, 2)))
        sim = torch.stack(sims, dim=0).mean(dim=0)
        d = ((1.0 - sim) * _FALLBACK_GAIN).clamp(0.0, 1.0)
        return d[0] if squeeze else d


@dataclass
class MetricRow:
    name: str
    psnr: float
    ssim: float
    lpips: float


@dataclass
class MetricReport:
    """Per-image metric table plus means; serializes to CSV."""

    backend: str
    rows: list[MetricRow] = field(default_factory=list)

    def add(self, name: str, psnr_db: float, ssim_val: float, lpips_val: float):
        self.rows.append(MetricRow(name, psnr_db, ssim_val, lpips_val))

    @property
    def mean_psnr(self) -> float:
        return sum(r.psnr for r in self.rows) / len(self.rows)

    @property
    def mean_ssim(self) -> float:
        return sum(r.ssim for r in self.rows) / len(self.rows)

    @property
    def mean_lpips(self) -> float:
        return sum(r.lpips for r in self.rows) / len(self.rows)

    def to_csv(self, path) -> None:
        if not self.rows:
            raise ValueError("empty metric report")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image", "psnr", "ssim", "lpips"])
            for r in self.rows:
                writer.writerow([r.name, f"{r.psnr:.6f}", f"{r.ssim:.6f}",
                                 f"{r.lpips:.6f}"])
            writer.writerow(["MEAN", f"{self.mean_psnr:.6f}",
                             f"{self.mean_ssim:.6f}", f"{self.mean_lpips:.6f}"])
