"""Network architectures for the LR-reconstruction stack and the SR model.

The reconstruction stack has three parts: a degradation encoder that
summarizes a low-resolution image into an embedding vector, an image
encoder that extracts full-resolution features from a reference image,
and a reconstructor whose convolutions are weight-modulated by the
(controller-scaled) embedding and which renders at LR resolution.
A frozen reference encoder provides the target features for the
alignment regularizer; the stand-in SR model is a small residual
network with pixel-shuffle upsampling.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

VALID_SCALES = (1, 2, 4)
MODULATION_EPS = 1e-8


def _conv3(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)


class ResidualBlock(nn.Module):
    """conv-relu-conv with identity skip; second conv damped at init."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = _conv3(channels, channels)
        self.conv2 = _conv3(channels, channels)
        with torch.no_grad():
            self.conv2.weight.mul_(0.1)
            self.conv2.bias.zero_()

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


def _single_image(fn):
    """Allow (C,H,W) single images on batch-first modules."""

    def wrapped(self, x, *args, **kwargs):
        if x.dim() == 3:
            return fn(self, x[None], *args, **kwargs)[0]
        return fn(self, x, *args, **kwargs)

    return wrapped


class DegradationEncoder(nn.Module):
    """LR image -> embedding vector summarizing its degradation.

    A residual trunk with a stride-2 reduction after every reduce_every
    blocks, global average pooling, and a linear projection.
    """

    def __init__(self, channels: int = 64, num_blocks: int = 16,
                 embed_dim: int = 512, reduce_every: int = 4):
        super().__init__()
        self.embed_dim = embed_dim
        self.head = _conv3(3, channels)
        body = []
        for i in range(num_blocks):
            body.append(ResidualBlock(channels))
            if (i + 1) % reduce_every == 0:
                body.append(_conv3(channels, channels, stride=2))
                body.append(nn.ReLU(inplace=True))
        self.body = nn.Sequential(*body)
        self.fc = nn.Linear(channels, embed_dim)

    def forward(self, x):
        single = x.dim() == 3
        if single:
            x = x[None]
        f = self.body(F.relu(self.head(x)))
        pooled = f.mean(dim=(2, 3))
        e = self.fc(pooled)
        return e[0] if single else e


class ImageEncoder(nn.Module):
    """Reference image -> spatial feature map at unchanged resolution."""

    def __init__(self, channels: int = 64, num_blocks: int = 6):
        super().__init__()
        self.out_channels = channels
        self.head = _conv3(3, channels)
        self.blocks = nn.ModuleList(ResidualBlock(channels)
                                    for _ in range(num_blocks))

    def forward(self, x):
        single = x.dim() == 3
        if single:
            x = x[None]
        f = self.head(x)
        for blk in self.blocks:
            f = blk(f)
        return f[0] if single else f


class ModulatedConv2d(nn.Module):
    """3x3 convolution whose weights are scaled per-sample by a style vector
    derived from the embedding, then demodulated to unit fan-in norm."""

    def __init__(self, in_ch: int, out_ch: int, embed_dim: int,
                 demodulate: bool = True, eps: float = MODULATION_EPS):
        super().__init__()
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.demodulate = demodulate
        self.eps = eps
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, 3, 3)
                                   / math.sqrt(in_ch * 9))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.affine = nn.Linear(embed_dim, in_ch)
        with torch.no_grad():
            self.affine.weight.normal_(0.0, 1.0 / math.sqrt(embed_dim))
            self.affine.bias.fill_(1.0)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        style = self.affine(emb)                      # (B, in_ch)
        weight = self.weight[None] * style[:, None, :, None, None]
        if self.demodulate:
            norm = torch.rsqrt(weight.pow(2).sum(dim=(2, 3, 4)) + self.eps)
            weight = weight * norm[:, :, None, None, None]
        # Grouped conv applies each sample's own kernel in one call.
        weight = weight.reshape(b * self.out_ch, self.in_ch, 3, 3)
        out = F.conv2d(x.reshape(1, b * c, h, w), weight, padding=1, groups=b)
        return out.reshape(b, self.out_ch, h, w) + self.bias[None, :, None, None]


class ModulatedResBlock(nn.Module):
    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.conv1 = ModulatedConv2d(channels, channels, embed_dim)
        self.conv2 = ModulatedConv2d(channels, channels, embed_dim)

    def forward(self, x, emb):
        return x + self.conv2(F.relu(self.conv1(x, emb)), emb)


class Reconstructor(nn.Module):
    """(embedding, reference features) -> image at 1/scale resolution.

    Residual trunk of modulated blocks over the reference features,
    followed by a strided downsampling chain and an output conv. The
    output is unbounded; consumers clamp at loss/metric time.
    """

    def __init__(self, feat_channels: int = 64, channels: int = 64,
                 embed_dim: int = 512, num_blocks: int = 8, scale: int = 4):
        super().__init__()
        if scale not in VALID_SCALES:
            raise ValueError(f"scale must be one of {VALID_SCALES}, got {scale}")
        self.scale = scale
        self.head = _conv3(feat_channels, channels)
        self.blocks = nn.ModuleList(ModulatedResBlock(channels, embed_dim)
                                    for _ in range(num_blocks))
        downs = []
        s = scale
        while s > 1:
            downs.append(_conv3(channels, channels, stride=2))
            downs.append(nn.ReLU(inplace=True))
            s //= 2
        self.down = nn.Sequential(*downs)
        self.tail = _conv3(channels, 3)
        with torch.no_grad():
            # Mid-range start keeps loss-time clamping from zeroing gradients.
            self.tail.bias.fill_(0.5)

    def forward(self, emb: torch.Tensor, feat: torch.Tensor) -> torch.Tensor:
        single = feat.dim() == 3
        if single:
            feat = feat[None]
        if emb.dim() == 1:
            emb = emb[None]
        x = self.head(feat)
        for blk in self.blocks:
            x = blk(x, emb)
        x = self.down(x)
        out = self.tail(x)
        return out[0] if single else out


class SRModel(nn.Module):
    """Small residual SR network with pixel-shuffle upsampling and an
    interpolation skip, so an untrained model starts near the bicubic
    baseline."""

    def __init__(self, channels: int = 64, num_blocks: int = 8, scale: int = 4):
        super().__init__()
        if scale not in VALID_SCALES:
            raise ValueError(f"scale must be one of {VALID_SCALES}, got {scale}")
        self.scale = scale
        self.head = _conv3(3, channels)
        self.blocks = nn.ModuleList(ResidualBlock(channels)
                                    for _ in range(num_blocks))
        self.fuse = _conv3(channels, channels)
        ups = []
        s = scale
        while s > 1:
            ups.append(_conv3(channels, channels * 4))
            ups.append(nn.PixelShuffle(2))
            ups.append(nn.ReLU(inplace=True))
            s //= 2
        self.upsample = nn.Sequential(*ups)
        self.tail = _conv3(channels, 3)
        with torch.no_grad():
            self.tail.weight.mul_(0.1)
            self.tail.bias.zero_()

    @_single_image
    def forward(self, x):
        base = x if self.scale == 1 else F.interpolate(
            x, scale_factor=self.scale, mode="bicubic", align_corners=False)
        f = self.head(x)
        g = f
        for blk in self.blocks:
            g = blk(g)
        g = self.fuse(g) + f
        return self.tail(self.upsample(g)) + base


class FallbackReferenceEncoder(nn.Module):
    """Frozen random four-layer conv encoder standing in for a pretrained
    semantic encoder: fixed seed, 1/8 resolution features, gradients flow
    to the input only."""

    def __init__(self, out_channels: int = 128, seed: int = 77):
        super().__init__()
        self.out_channels = out_channels
        self.reduction = 8
        gen = torch.Generator().manual_seed(seed)
        chans = [3, out_channels // 4, out_channels // 2, out_channels // 2,
                 out_channels]
        strides = [2, 2, 2, 1]
        convs = []
        for i in range(4):
            conv = nn.Conv2d(chans[i], chans[i + 1], 3, stride=strides[i],
                             padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  / math.sqrt(chans[i] * 9))
                conv.bias.zero_()
            convs.append(conv)
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    @_single_image
    def forward(self, x):
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i + 1 < len(self.convs):
                x = F.gelu(x)
        return x


class _ClipBottleneck(nn.Module):
    expansion = 4

    def __init__(self, inplanes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.relu1 = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(planes, planes, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.relu2 = nn.ReLU(inplace=True)
        self.avgpool = nn.AvgPool2d(stride) if stride > 1 else nn.Identity()
        self.conv3 = nn.Conv2d(planes, planes * self.expansion, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu3 = nn.ReLU(inplace=True)
        self.downsample = None
        if stride > 1 or inplanes != planes * self.expansion:
            self.downsample = nn.Sequential(OrderedDict([
                ("-1", nn.AvgPool2d(stride) if stride > 1 else nn.Identity()),
                ("0", nn.Conv2d(inplanes, planes * self.expansion, 1,
                                bias=False)),
                ("1", nn.BatchNorm2d(planes * self.expansion)),
            ]))

    def forward(self, x):
        identity = x
        out = self.relu1(self.bn1(self.conv1(x)))
        out = self.relu2(self.bn2(self.conv2(out)))
        out = self.avgpool(out)
        out = self.bn3(self.conv3(out))
        if self.downsample is not None:
            identity = self.downsample(x)
        return self.relu3(out + identity)


class ClipResNetTrunk(nn.Module):
    """Antialiased ResNet trunk (three-conv stem, avg-pool downsampling)
    truncated after the third stage: 1024-channel features at 1/16
    resolution. Module names match the published visual-tower layout so
    converted weight files load directly."""

    MEAN = (0.48145466, 0.4578275, 0.40821073)
    STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, width: int = 64, layers=(3, 4, 6)):
        super().__init__()
        self.out_channels = width * 16
        self.reduction = 16
        self.conv1 = nn.Conv2d(3, width // 2, 3, stride=2, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(width // 2)
        self.relu1 = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(width // 2, width // 2, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width // 2)
        self.relu2 = nn.ReLU(inplace=True)
        self.conv3 = nn.Conv2d(width // 2, width, 3, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(width)
        self.relu3 = nn.ReLU(inplace=True)
        self.avgpool = nn.AvgPool2d(2)
        self._inplanes = width
        self.layer1 = self._make_layer(width, layers[0])
        self.layer2 = self._make_layer(width * 2, layers[1], stride=2)
        self.layer3 = self._make_layer(width * 4, layers[2], stride=2)
        self.register_buffer("_mean", torch.tensor(self.MEAN).view(1, 3, 1, 1))
        self.register_buffer("_std", torch.tensor(self.STD).view(1, 3, 1, 1))

    def _make_layer(self, planes: int, blocks: int, stride: int = 1):
        layers = [_ClipBottleneck(self._inplanes, planes, stride)]
        self._inplanes = planes * _ClipBottleneck.expansion
        for _ in range(1, blocks):
            layers.append(_ClipBottleneck(self._inplanes, planes))
        return nn.Sequential(*layers)

    @_single_image
    def forward(self, x):
        x = (x - self._mean) / self._std
        x = self.relu1(self.bn1(self.conv1(x)))
        x = self.relu2(self.bn2(self.conv2(x)))
        x = self.relu3(self.bn3(self.conv3(x)))
        x = self.avgpool(x)
        x = self.layer1(x)
        x = self.layer2(x)
        return self.layer3(x)


def build_reference_encoder(mode: str = "fallback", weights_path=None,
                            out_channels: int = 128, seed: int = 77) -> nn.Module:
    """Construct the frozen reference feature encoder.

    mode "fallback" needs no weights. mode "clip" requires a state-dict
    file for the visual trunk and raises FileNotFoundError without one.
    """
    if mode == "fallback":
        return FallbackReferenceEncoder(out_channels=out_channels, seed=seed)
    if mode != "clip":
        raise ValueError(f"unknown reference encoder mode {mode!r}")
    if weights_path is None or not Path(weights_path).exists():
        raise FileNotFoundError(
            "reference encoder weights file not found "
            f"({weights_path!r}); pass a trunk state dict or use mode='fallback'")
    trunk = ClipResNetTrunk()
    raw = torch.load(weights_path, map_location="cpu")
    if isinstance(raw, dict) and "state_dict" in raw:
        raw = raw["state_dict"]
    wanted = set(trunk.state_dict().keys())
    filtered = {}
    for key, value in raw.items():
        name = key[len("visual."):] if key.startswith("visual.") else key
        if name in wanted:
            filtered[name] = value
    missing = wanted - set(filtered) - {"_mean", "_std"}
    if missing:
        raise ValueError(
            f"reference encoder weights missing {len(missing)} tensors, e.g. "
            f"{sorted(missing)[:3]}")
    trunk.load_state_dict(filtered, strict=False)
    trunk.eval()
    for p in trunk.parameters():
        p.requires_grad_(False)
    return trunk


# ---------- configuration and builders ----------

@dataclass
class LrnConfig:
    """Shape and init settings for the reconstruction stack."""

    scale: int = 4
    embed_dim: int = 512
    e_deg_channels: int = 64
    e_deg_blocks: int = 16
    e_deg_reduce_every: int = 4
    e_img_channels: int = 64
    e_img_blocks: int = 6
    recon_channels: int = 64
    recon_blocks: int = 8
    ref_mode: str = "fallback"
    ref_weights: str | None = None
    ref_channels: int = 128
    ref_seed: int = 77
    init_seed: int = 0


@dataclass
class SrConfig:
    scale: int = 4
    channels: int = 64
    num_blocks: int = 8
    init_seed: int = 0


def _seeded(seed: int, builder):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return builder()


def build_e_deg(cfg: LrnConfig) -> DegradationEncoder:
    return _seeded(cfg.init_seed, lambda: DegradationEncoder(
        channels=cfg.e_deg_channels, num_blocks=cfg.e_deg_blocks,
        embed_dim=cfg.embed_dim, reduce_every=cfg.e_deg_reduce_every))


def build_e_img(cfg: LrnConfig) -> ImageEncoder:
    return _seeded(cfg.init_seed + 1, lambda: ImageEncoder(
        channels=cfg.e_img_channels, num_blocks=cfg.e_img_blocks))


def build_reconstructor(cfg: LrnConfig) -> Reconstructor:
    return _seeded(cfg.init_seed + 2, lambda: Reconstructor(
        feat_channels=cfg.e_img_channels, channels=cfg.recon_channels,
        embed_dim=cfg.embed_dim, num_blocks=cfg.recon_blocks, scale=cfg.scale))


def build_sr_model(cfg: SrConfig) -> SRModel:
    return _seeded(cfg.init_seed + 3, lambda: SRModel(
        channels=cfg.channels, num_blocks=cfg.num_blocks, scale=cfg.scale))


def freeze_module(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)


def freeze_shallow(model: nn.Module, fraction: float) -> int:
    """Freeze the input conv plus the first floor(fraction * n) residual
    blocks; fraction 1 freezes the entire model. Returns the number of
    newly frozen parameters (tensor count)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0,1], got {fraction}")
    if not hasattr(model, "head") or not hasattr(model, "blocks"):
        raise TypeError("model lacks head/blocks structure")
    frozen = 0
    targets = list(model.head.parameters())
    n = int(math.floor(fraction * len(model.blocks)))
    for blk in list(model.blocks)[:n]:
        targets.extend(blk.parameters())
    if fraction >= 1.0:
        targets = list(model.parameters())
    for p in targets:
        if p.requires_grad:
            p.requires_grad_(False)
            frozen += 1
    return frozen


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters()
               if p.requires_grad or not trainable_only)


def hash_state_dict(state: dict) -> str:
    """Order-independent sha256 over tensor names, shapes, and bytes."""
    digest = hashlib.sha256()
    for name in sorted(state.keys()):
        t = state[name]
        digest.update(name.encode())
        if isinstance(t, torch.Tensor):
            digest.update(str(t.dtype).encode())
            digest.update(str(tuple(t.shape)).encode())
            digest.update(t.detach().cpu().contiguous().numpy().tobytes())
        else:
            digest.update(repr(t).encode())
    return digest.hexdigest()


def save_checkpoint(payload: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=False)
