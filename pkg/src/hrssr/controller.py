"""Quality-driven controller for the degradation embedding.

The high-resolution quality indicator (HQI) rates how close a reference
image is to the plain upsampling of the LR input: 1 minus their perceptual
distance, in [0, 1]. The controller vector s scales the degradation
embedding elementwise; its mean tracks (1 - HQI) during pretraining
(suppress the embedding when the reference is already degraded) and HQI
during finetuning (trust the embedding when the SR output is still poor).
s is a control signal: it never carries gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .imagedata import bicubic_resize

STAGES = ("pretrain", "finetune")


def hqi(x_lr: torch.Tensor, y_hr: torch.Tensor, perceptual) -> float:
    """1 - perceptual_distance(upsample(x_lr), y_hr), clamped to [0, 1].

    Detached by construction; both inputs are treated as constants.
    """
    if x_lr.dim() != 3 or y_hr.dim() != 3:
        raise ValueError("hqi expects single (C,H,W) images")
    if (y_hr.shape[1] % x_lr.shape[1]) or (y_hr.shape[2] % x_lr.shape[2]):
        raise ValueError(
            f"reference {tuple(y_hr.shape)} is not an integer upscale of "
            f"input {tuple(x_lr.shape)}")
    with torch.no_grad():
        up = bicubic_resize(x_lr.detach(), y_hr.shape[1], y_hr.shape[2])
        d = float(perceptual(up, y_hr.detach().clamp(0.0, 1.0)))
    return min(max(1.0 - d, 0.0), 1.0)


@dataclass
class ControllerVector:
    """Per-sample embedding scale with its provenance."""

    values: torch.Tensor
    stage: str
    hqi: float


@dataclass
class ControllerConfig:
    """Switches threaded through training configs.

    enabled=False short-circuits the controller to all-ones. noise=False
    zeroes the stochastic part (deterministic evaluation mode). invert
    swaps the stage formula (mean 1-HQI instead of HQI and vice versa),
    used by the controller-variant ablation.
    """

    enabled: bool = True
    noise: bool = True
    invert: bool = False


def make_controller(stage: str, hqi_value: float, dim: int,
                    rng: torch.Generator | None = None,
                    noise: bool = True, invert: bool = False) -> ControllerVector:
    """Draw s = n + target * 1 with n ~ N(0, I) (or n = 0 when noise is off).

    target is (1 - hqi_value) for pretraining and hqi_value for finetuning;
    invert swaps the two.
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    if not 0.0 <= hqi_value <= 1.0:
        raise ValueError(f"hqi must be in [0,1], got {hqi_value}")
    if dim < 1:
        raise ValueError(f"dim must be positive, got {dim}")
    target = 1.0 - hqi_value if stage == "pretrain" else hqi_value
    if invert:
        target = 1.0 - target
    if noise:
        n = torch.randn(dim, generator=rng)
    else:
        n = torch.zeros(dim)
    values = (n + target).detach()
    return ControllerVector(values=values, stage=stage, hqi=hqi_value)


def controller_batch(stage: str, hqi_values, dim: int,
                     rng: torch.Generator | None = None,
                     cfg: ControllerConfig | None = None) -> torch.Tensor:
    """Stack per-sample controller vectors into a (B, dim) matrix.

    With the controller disabled every row is all ones (the embedding
    passes through unchanged).
    """
    cfg = cfg or ControllerConfig()
    rows = []
    for h in hqi_values:
        if not cfg.enabled:
            rows.append(torch.ones(dim))
        else:
            rows.append(make_controller(stage, float(h), dim, rng=rng,
                                        noise=cfg.noise,
                                        invert=cfg.invert).values)
    return torch.stack(rows, dim=0)


def modulate(e_d: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Elementwise product s * e_d; s is detached so gradients (if any)
    reach only the embedding."""
    if e_d.shape != s.shape:
        raise ValueError(f"shape mismatch: {tuple(e_d.shape)} vs {tuple(s.shape)}")
    return e_d * s.detach()
