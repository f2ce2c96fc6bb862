"""Training objectives for both stages, plus the model-stack container.

Pretraining: reconstruct the synthetic LR image from its degradation
embedding (scaled by the controller) and the ground-truth HR features,
with the alignment penalty on the HR image. Finetuning: the same
reconstruction objective on real LR images with the SR output standing
in for the missing HR reference; only the SR model receives gradients,
and the reconstruction terms are focused by the high-frequency weight
map of the reconstruction itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .controller import ControllerConfig, controller_batch, hqi, modulate
from .far import AlignmentMaps, phi_far
from .imagedata import hf_weight_map
from .metrics import PerceptualDistance
from .models import (LrnConfig, build_e_deg, build_e_img,
                     build_reconstructor, build_reference_encoder, freeze_module)

PRETRAIN_FAR_WEIGHT = 0.1
FINETUNE_FAR_WEIGHT = 0.1
FINETUNE_FAR_RANGE = (0.05, 0.3)


@dataclass
class LossWeights:
    """Term weights: l1 + perceptual reconstruction, alignment penalty,
    and the high-frequency weighting switch for finetuning."""

    lambda_l1: float = 1.0
    lambda_perceptual: float = 0.2
    lambda_far: float = PRETRAIN_FAR_WEIGHT
    hf_weighting: bool = False


@dataclass
class LrnStack:
    """The pretrained reconstruction system bundled with its frozen
    reference encoder and the shared perceptual backend."""

    e_deg: nn.Module
    e_img: nn.Module
    recon: nn.Module
    maps: AlignmentMaps
    ref_encoder: nn.Module
    perceptual: PerceptualDistance
    config: LrnConfig

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    @property
    def scale(self) -> int:
        return self.config.scale

    def trainable_modules(self) -> dict[str, nn.Module]:
        return {"e_deg": self.e_deg, "e_img": self.e_img,
                "recon": self.recon, "maps": self.maps}

    def trainable_parameters(self):
        for module in self.trainable_modules().values():
            yield from (p for p in module.parameters() if p.requires_grad)

    def freeze(self) -> None:
        for module in self.trainable_modules().values():
            freeze_module(module)

    def train(self) -> None:
        for module in self.trainable_modules().values():
            module.train()

    def eval(self) -> None:
        for module in self.trainable_modules().values():
            module.eval()


def build_lrn_stack(cfg: LrnConfig,
                    perceptual_backend: str = "fallback") -> LrnStack:
    e_deg = build_e_deg(cfg)
    e_img = build_e_img(cfg)
    recon = build_reconstructor(cfg)
    ref = build_reference_encoder(cfg.ref_mode, cfg.ref_weights,
                                  cfg.ref_channels, cfg.ref_seed)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.init_seed + 4)
        maps = AlignmentMaps(cfg.e_img_channels, ref.out_channels)
    perceptual = PerceptualDistance(backend=perceptual_backend)
    return LrnStack(e_deg=e_deg, e_img=e_img, recon=recon, maps=maps,
                    ref_encoder=ref, perceptual=perceptual, config=cfg)


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x[None] if x.dim() == 3 else x


def _weight_maps(x_hat: torch.Tensor) -> torch.Tensor:
    """Per-sample detail maps of the (detached, clamped) reconstruction."""
    ref = x_hat.detach().clamp(0.0, 1.0)
    maps = [hf_weight_map(ref[i]) for i in range(ref.shape[0])]
    return torch.stack(maps)[:, None]


def rec_loss(x_hat: torch.Tensor, x: torch.Tensor, weights: LossWeights,
             perceptual: PerceptualDistance,
             weight_map: torch.Tensor | None = None):
    """lambda_l1 * mean|x_hat - x| + lambda_perceptual * d(x_hat, x).

    The prediction is clamped to [0,1] at loss time. Under hf_weighting
    both terms are computed on W*x_hat vs W*x where W is the detail map
    of the prediction (detached) or the explicitly supplied weight_map.
    Returns (total, parts).
    """
    if x_hat.shape != x.shape:
        raise ValueError(
            f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    xh = _batched(x_hat).clamp(0.0, 1.0)
    xt = _batched(x).detach().clamp(0.0, 1.0)
    if weights.hf_weighting:
        w = weight_map if weight_map is not None else _weight_maps(xh)
        w = _batched(w) if w.dim() == 3 else w
        if w.dim() == 2:
            w = w[None, None]
        w = w.detach()
        xh = w * xh
        xt = w * xt
    l1 = (xh - xt).abs().mean()
    perc = perceptual(xh, xt).mean()
    total = weights.lambda_l1 * l1 + weights.lambda_perceptual * perc
    parts = {"l1": float(l1.detach()), "perceptual": float(perc.detach())}
    return total, parts


def pretrain_loss(lr_batch: torch.Tensor, hr_batch: torch.Tensor,
                  stack: LrnStack, ctrl: ControllerConfig,
                  weights: LossWeights,
                  rng: torch.Generator | None = None):
    """Stage-one objective on a synthetic (LR, HR) batch. Returns
    (total, parts) with parts carrying the logged scalars."""
    lr_batch = _batched(lr_batch)
    hr_batch = _batched(hr_batch)
    b = lr_batch.shape[0]
    hqis = [hqi(lr_batch[i], hr_batch[i], stack.perceptual) for i in range(b)]
    s = controller_batch("pretrain", hqis, stack.embed_dim, rng=rng, cfg=ctrl)
    e_d = stack.e_deg(lr_batch)
    e_im = stack.e_img(hr_batch)
    x_hat = stack.recon(modulate(e_d, s), e_im)
    rec, parts = rec_loss(x_hat, lr_batch, weights, stack.perceptual)
    if weights.lambda_far > 0:
        reg = phi_far(hr_batch, stack.e_img, stack.ref_encoder, stack.maps)
        total = rec + weights.lambda_far * reg
        parts["far"] = float(reg.detach())
    else:
        total = rec
        parts["far"] = 0.0
    parts["rec"] = float(rec.detach())
    parts["hqi_mean"] = sum(hqis) / b
    return total, parts


def finetune_loss(lr_batch: torch.Tensor, sr_model: nn.Module,
                  stack: LrnStack, ctrl: ControllerConfig,
                  weights: LossWeights,
                  rng: torch.Generator | None = None,
                  hqi_override: float | None = None,
                  weight_map: torch.Tensor | None = None):
    """Stage-two objective on a real LR batch: reconstruct the LR input
    from its embedding and the SR output's features. The stack is frozen;
    gradients reach only the SR model. hqi_override and weight_map pin
    the two detached control signals (evaluation, ablations, and
    derivative checks need them fixed).
    """
    lr_batch = _batched(lr_batch)
    b = lr_batch.shape[0]
    y = _batched(sr_model(lr_batch)).clamp(0.0, 1.0)
    if hqi_override is None:
        hqis = [hqi(lr_batch[i], y[i].detach(), stack.perceptual)
                for i in range(b)]
    else:
        hqis = [hqi_override] * b
    s = controller_batch("finetune", hqis, stack.embed_dim, rng=rng, cfg=ctrl)
    e_d = stack.e_deg(lr_batch)
    e_im = stack.e_img(y)
    x_hat = stack.recon(modulate(e_d, s), e_im)
    rec, parts = rec_loss(x_hat, lr_batch, weights, stack.perceptual,
                          weight_map=weight_map)
    if weights.lambda_far > 0:
        reg = phi_far(y, stack.e_img, stack.ref_encoder, stack.maps)
        total = rec + weights.lambda_far * reg
        parts["far"] = float(reg.detach())
    else:
        total = rec
        parts["far"] = 0.0
    parts["rec"] = float(rec.detach())
    parts["hqi_mean"] = sum(hqis) / b
    return total, parts
