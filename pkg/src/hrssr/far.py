"""Feature-alignment regularizer.

Second-order feature statistics (Gram matrices) of the trainable image
encoder are aligned, through two learnable linear maps, with those of a
frozen reference encoder. The penalty grows when an image drifts away
from the statistics seen during pretraining, which is what makes it a
useful guard against degenerate finetuning.
"""

from __future__ import annotations

import torch
import torch.nn as nn


def gram(feat: torch.Tensor) -> torch.Tensor:
    """Channel co-activation matrix: G[j,k] = mean over positions of
    feat[j] * feat[k]. Accepts (C,H,W) -> (C,C) or (B,C,H,W) -> (B,C,C)."""
    if feat.dim() == 3:
        c, h, w = feat.shape
        flat = feat.reshape(c, h * w)
        return flat @ flat.t() / (h * w)
    if feat.dim() == 4:
        b, c, h, w = feat.shape
        flat = feat.reshape(b, c, h * w)
        return torch.bmm(flat, flat.transpose(1, 2)) / (h * w)
    raise ValueError(f"expected (C,H,W) or (B,C,H,W), got {tuple(feat.shape)}")


def descriptor(feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Row-wise average and maximum of the Gram matrix: two C-vectors
    summarizing mean and peak co-activation per channel."""
    g = gram(feat)
    s_avg = g.mean(dim=-1)
    s_max = g.max(dim=-1).values
    return s_avg, s_max


class AlignmentMaps(nn.Module):
    """Learnable linear maps from image-encoder descriptor space to
    reference descriptor space; bias-free so a zero map is exactly zero."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.t_avg = nn.Linear(in_dim, out_dim, bias=False)
        self.t_max = nn.Linear(in_dim, out_dim, bias=False)

    @classmethod
    def identity(cls, dim: int) -> "AlignmentMaps":
        maps = cls(dim, dim)
        with torch.no_grad():
            maps.t_avg.weight.copy_(torch.eye(dim))
            maps.t_max.weight.copy_(torch.eye(dim))
        return maps


def far_loss(e_im: torch.Tensor, e_cl: torch.Tensor,
             maps: AlignmentMaps) -> torch.Tensor:
    """Euclidean distance between mapped image-encoder descriptors and
    reference descriptors, summed over the avg and max branches. Batched
    inputs are averaged over the batch."""
    if e_im.dim() != e_cl.dim():
        raise ValueError("feature ranks differ")
    a_im, m_im = descriptor(e_im)
    a_cl, m_cl = descriptor(e_cl)
    d_avg = (maps.t_avg(a_im) - a_cl).norm(dim=-1)
    d_max = (maps.t_max(m_im) - m_cl).norm(dim=-1)
    return (d_avg + d_max).mean()


def phi_far(y: torch.Tensor, image_encoder: nn.Module,
            reference_encoder: nn.Module, maps: AlignmentMaps) -> torch.Tensor:
    """Alignment penalty of an image: far_loss between its trainable and
    frozen reference features."""
    return far_loss(image_encoder(y), reference_encoder(y), maps)
