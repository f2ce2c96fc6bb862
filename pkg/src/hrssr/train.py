"""Optimization loops: stack pretraining, SR-model supervised pretraining,
and self-supervised SR finetuning with a frozen stack.

Both stages use Adam(0.9, 0.999), global-norm gradient clipping, EMA
shadow weights, and a CSV scalar log. Finetuning holds out a validation
split (sorted-filename stride), scores it with the reconstruction loss
under the shadow weights, and keeps the best-validation checkpoint; the
final-iteration checkpoint is saved alongside it. Runs are reproducible:
the same seed yields bit-identical parameters, and deterministic mode
(config flag or HRSSR_DETERMINISTIC=1) additionally pins algorithm
selection.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import degrade
from .controller import ControllerConfig
from .imagedata import crop_aligned_pair, crop_patch, load_image, random_patch_coords
from .losses import (FINETUNE_FAR_WEIGHT, LossWeights, LrnStack,
                     build_lrn_stack, finetune_loss, pretrain_loss, rec_loss)
from .metrics import PerceptualDistance
from .models import (LrnConfig, SrConfig, build_sr_model, freeze_shallow,
                     hash_state_dict, load_checkpoint, save_checkpoint)

ADAM_BETAS = (0.9, 0.999)
LOG_COLUMNS = ["step", "loss_rec", "loss_far", "lr", "val_score"]


@dataclass
class TrainConfig:
    """Knobs shared by every loop; stage factories set the defaults that
    differ between stages."""

    seed: int = 0
    lr: float = 2e-4
    total_iters: int = 2000
    batch_size: int = 16
    patch_size: int = 64            # HR-domain patch edge
    ema_decay: float = 0.999
    grad_clip: float = 1.0
    eval_every: int = 50
    early_stop_patience: int = 0    # eval rounds; 0 keeps best without breaking
    val_fraction: float = 0.1
    freeze_fraction: float = 0.2
    schedule: str = "cosine"        # cosine | constant
    deterministic: bool = False
    lambda_l1: float = 1.0
    lambda_perceptual: float = 0.2
    lambda_far: float = 0.1
    hf_weighting: bool = False
    controller_enabled: bool = True
    controller_noise: bool = True
    controller_invert: bool = False

    @classmethod
    def pretrain_defaults(cls, **over) -> "TrainConfig":
        return cls(**{**dict(lr=2e-4, total_iters=2000, hf_weighting=False),
                      **over})

    @classmethod
    def finetune_defaults(cls, **over) -> "TrainConfig":
        return cls(**{**dict(lr=3e-6, total_iters=400, batch_size=8,
                             hf_weighting=True,
                             lambda_far=FINETUNE_FAR_WEIGHT),
                      **over})

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_l1=self.lambda_l1,
                           lambda_perceptual=self.lambda_perceptual,
                           lambda_far=self.lambda_far,
                           hf_weighting=self.hf_weighting)

    def controller_cfg(self) -> ControllerConfig:
        return ControllerConfig(enabled=self.controller_enabled,
                                noise=self.controller_noise,
                                invert=self.controller_invert)


def deterministic_requested(cfg: TrainConfig | None = None) -> bool:
    if os.environ.get("HRSSR_DETERMINISTIC", "") == "1":
        return True
    return bool(cfg and cfg.deterministic)


def seed_everything(seed: int, deterministic: bool = False) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def schedule_lr(cfg: TrainConfig, step: int) -> float:
    """Learning rate at a given step: half-cosine decay to zero or constant."""
    if cfg.schedule == "constant":
        return cfg.lr
    if cfg.schedule == "cosine":
        t = min(max(step, 0), cfg.total_iters)
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t / cfg.total_iters))
    raise ValueError(f"unknown schedule {cfg.schedule!r}")


class EmaShadow:
    """Exponential moving average of trainable parameters.

    update() folds the current parameters into the shadow; apply_shadow()
    swaps the shadow in (backing up the live values) and restore() swaps
    back, so evaluation can run on the averaged weights.
    """

    def __init__(self, modules: dict[str, torch.nn.Module], decay: float):
        self.decay = decay
        self.modules = modules
        self.shadow: dict[str, torch.Tensor] = {}
        self.backup: dict[str, torch.Tensor] = {}
        for prefix, module in modules.items():
            for name, p in module.named_parameters():
                if p.requires_grad:
                    self.shadow[f"{prefix}.{name}"] = p.detach().clone()

    def _iter_params(self):
        for prefix, module in self.modules.items():
            for name, p in module.named_parameters():
                key = f"{prefix}.{name}"
                if key in self.shadow:
                    yield key, p

    def update(self) -> None:
        d = self.decay
        with torch.no_grad():
            for key, p in self._iter_params():
                self.shadow[key].mul_(d).add_(p.detach(), alpha=1.0 - d)

    def apply_shadow(self) -> None:
        with torch.no_grad():
            for key, p in self._iter_params():
                self.backup[key] = p.detach().clone()
                p.copy_(self.shadow[key])

    def restore(self) -> None:
        with torch.no_grad():
            for key, p in self._iter_params():
                p.copy_(self.backup[key])
        self.backup = {}

    def state_dict(self) -> dict:
        return {k: v.clone() for k, v in self.shadow.items()}

    def load_state_dict(self, state: dict) -> None:
        for k in self.shadow:
            self.shadow[k] = state[k].clone()


class BestTracker:
    """Keep-best bookkeeping with optional patience-based stopping.

    update() returns (is_best, should_stop). patience counts consecutive
    non-improving evaluations; 0 disables stopping so runs go the full
    horizon while still tracking the best score.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = math.inf
        self.best_step = -1
        self.stall = 0

    def update(self, step: int, score: float) -> tuple[bool, bool]:
        if score < self.best_score:
            self.best_score = score
            self.best_step = step
            self.stall = 0
            return True, False
        self.stall += 1
        return False, bool(self.patience) and self.stall >= self.patience


class _CsvLog:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(LOG_COLUMNS)

    def row(self, step, loss_rec, loss_far, lr, val_score=""):
        for v in (loss_rec, loss_far, lr):
            if not math.isfinite(v):
                raise RuntimeError(f"non-finite log value at step {step}")
        self._writer.writerow([step, f"{loss_rec:.6f}", f"{loss_far:.6f}",
                               f"{lr:.8g}",
                               "" if val_score == "" else f"{val_score:.6f}"])
        self._fh.flush()

    def close(self):
        self._fh.close()


def _abort_if_not_finite(total: torch.Tensor, step: int, parts: dict) -> None:
    if not torch.isfinite(total):
        raise RuntimeError(
            f"training aborted: non-finite loss at step {step}; parts={parts}")


def _write_config(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)


# ---------- data access ----------

class PairedData:
    """In-memory paired dataset from a degradation manifest."""

    def __init__(self, manifest_path):
        rows = degrade.read_manifest(manifest_path)
        if not rows:
            raise ValueError(f"manifest {manifest_path} has no rows")
        self.scale = rows[0]["scale"]
        self.items = []
        for row in rows:
            if row["scale"] != self.scale:
                raise ValueError("mixed scales in one manifest")
            hr = load_image(row["hr_path"])
            lr = load_image(row["lr_path"])
            if hr.shape[1] != lr.shape[1] * self.scale or \
               hr.shape[2] != lr.shape[2] * self.scale:
                raise ValueError(
                    f"pair {row['lr_path']} does not match scale {self.scale}")
            self.items.append((lr, hr))

    def sample_batch(self, batch_size: int, hr_patch: int,
                     rng: np.random.Generator):
        if hr_patch % self.scale:
            raise ValueError(
                f"patch size {hr_patch} not divisible by scale {self.scale}")
        lr_patch = hr_patch // self.scale
        lrs, hrs = [], []
        for _ in range(batch_size):
            lr, hr = self.items[int(rng.integers(0, len(self.items)))]
            size = min(lr_patch, lr.shape[1], lr.shape[2])
            top, left = random_patch_coords(lr.shape[1], lr.shape[2], size, rng)
            lp, hp = crop_aligned_pair(lr, hr, top, left, size, self.scale)
            lrs.append(lp)
            hrs.append(hp)
        return torch.stack(lrs), torch.stack(hrs)


class UnpairedData:
    """In-memory LR-only dataset with a deterministic validation split."""

    def __init__(self, lr_dir, val_fraction: float):
        paths = degrade.list_images(lr_dir)
        if not paths:
            raise FileNotFoundError(f"no images in {lr_dir}")
        self.names = [p.name for p in paths]
        self.images = [load_image(p) for p in paths]
        stride = max(2, round(1.0 / val_fraction)) if val_fraction > 0 else 0
        self.val_idx = list(range(0, len(paths), stride)) if stride else []
        if self.val_idx and len(self.val_idx) == len(paths):
            self.val_idx = self.val_idx[:-1]
        self.train_idx = [i for i in range(len(paths))
                          if i not in set(self.val_idx)]
        if not self.train_idx:
            raise ValueError(f"no training images left in {lr_dir}")

    def sample_batch(self, batch_size: int, lr_patch: int,
                     rng: np.random.Generator):
        outs = []
        for _ in range(batch_size):
            img = self.images[self.train_idx[int(rng.integers(0, len(self.train_idx)))]]
            size = min(lr_patch, img.shape[1], img.shape[2])
            top, left = random_patch_coords(img.shape[1], img.shape[2], size, rng)
            outs.append(crop_patch(img, top, left, size))
        return torch.stack(outs)

    def val_images(self):
        return [self.images[i] for i in self.val_idx]


# ---------- checkpoint bundles ----------

def save_lrn(stack: LrnStack, path, step: int, ema: EmaShadow | None = None,
             extra: dict | None = None) -> None:
    payload = {
        "kind": "lrn",
        "config": asdict(stack.config),
        "perceptual_backend": stack.perceptual.backend,
        "state": {name: module.state_dict()
                  for name, module in stack.trainable_modules().items()},
        "ema": ema.state_dict() if ema is not None else None,
        "step": step,
    }
    if extra:
        payload.update(extra)
    save_checkpoint(payload, path)


def load_lrn(path, use_ema: bool = True) -> LrnStack:
    """Rebuild a stack from a bundle; shadow weights are applied by default."""
    payload = load_checkpoint(path)
    if payload.get("kind") != "lrn":
        raise ValueError(f"{path} is not a reconstruction-stack checkpoint")
    cfg = LrnConfig(**payload["config"])
    stack = build_lrn_stack(cfg, perceptual_backend=payload["perceptual_backend"])
    for name, module in stack.trainable_modules().items():
        module.load_state_dict(payload["state"][name])
    if use_ema and payload.get("ema"):
        shadow = payload["ema"]
        for name, module in stack.trainable_modules().items():
            own = module.state_dict()
            for pname, _ in module.named_parameters():
                key = f"{name}.{pname}"
                if key in shadow:
                    own[pname] = shadow[key]
            module.load_state_dict(own)
    return stack


def save_sr(model, cfg: SrConfig, path, step: int,
            ema_state: dict | None = None, extra: dict | None = None) -> None:
    payload = {
        "kind": "sr",
        "config": asdict(cfg),
        "state": model.state_dict(),
        "ema": ema_state,
        "step": step,
    }
    if extra:
        payload.update(extra)
    save_checkpoint(payload, path)


def load_sr(path, use_ema: bool = False):
    """Returns (model, SrConfig). use_ema swaps shadow weights in."""
    payload = load_checkpoint(path)
    if payload.get("kind") != "sr":
        raise ValueError(f"{path} is not an SR-model checkpoint")
    cfg = SrConfig(**payload["config"])
    model = build_sr_model(cfg)
    model.load_state_dict(payload["state"])
    if use_ema and payload.get("ema"):
        own = model.state_dict()
        for pname, _ in model.named_parameters():
            key = f"sr.{pname}"
            if key in payload["ema"]:
                own[pname] = payload["ema"][key]
        model.load_state_dict(own)
    return model, cfg


def lrn_hash(stack: LrnStack) -> str:
    combined = {}
    for name, module in stack.trainable_modules().items():
        for k, v in module.state_dict().items():
            combined[f"{name}.{k}"] = v
    return hash_state_dict(combined)


# ---------- stage one: stack pretraining ----------

def pretrain(cfg: TrainConfig, manifest_path, out_dir,
             model_cfg: LrnConfig | None = None) -> dict:
    """Train the reconstruction stack on synthetic pairs. Writes
    lrn_final.pt, train_log.csv, and config.json under out_dir."""
    out_dir = Path(out_dir)
    deterministic = deterministic_requested(cfg)
    seed_everything(cfg.seed, deterministic)
    data = PairedData(manifest_path)
    model_cfg = model_cfg or LrnConfig()
    if model_cfg.scale != data.scale:
        raise ValueError(f"model scale {model_cfg.scale} != data scale {data.scale}")
    stack = build_lrn_stack(model_cfg)
    stack.train()
    params = list(stack.trainable_parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=ADAM_BETAS)
    ema = EmaShadow(stack.trainable_modules(), cfg.ema_decay)
    data_rng = np.random.default_rng(cfg.seed + 1)
    noise_rng = torch.Generator().manual_seed(cfg.seed + 2)
    weights = cfg.loss_weights()
    ctrl = cfg.controller_cfg()
    _write_config(out_dir, {"stage": "pretrain", "train": asdict(cfg),
                            "model": asdict(model_cfg)})
    log = _CsvLog(out_dir / "train_log.csv")
    final_parts = {}
    try:
        for step in range(cfg.total_iters):
            lr_now = schedule_lr(cfg, step)
            for group in opt.param_groups:
                group["lr"] = lr_now
            lr_b, hr_b = data.sample_batch(cfg.batch_size, cfg.patch_size,
                                           data_rng)
            total, parts = pretrain_loss(lr_b, hr_b, stack, ctrl, weights,
                                         rng=noise_rng)
            _abort_if_not_finite(total, step, parts)
            opt.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            ema.update()
            log.row(step, parts["rec"], parts["far"], lr_now)
            final_parts = parts
    finally:
        log.close()
    ckpt = out_dir / "lrn_final.pt"
    save_lrn(stack, ckpt, cfg.total_iters, ema=ema)
    return {"checkpoint": str(ckpt), "log": str(out_dir / "train_log.csv"),
            "final_parts": final_parts, "hash": lrn_hash(stack)}


# ---------- supervised SR pretraining (stand-in model) ----------

def train_sr(cfg: TrainConfig, manifest_path, out_dir,
             sr_cfg: SrConfig | None = None) -> dict:
    """Supervised L1 training of the stand-in SR model on paired data."""
    out_dir = Path(out_dir)
    deterministic = deterministic_requested(cfg)
    seed_everything(cfg.seed, deterministic)
    data = PairedData(manifest_path)
    sr_cfg = sr_cfg or SrConfig()
    if sr_cfg.scale != data.scale:
        raise ValueError(f"model scale {sr_cfg.scale} != data scale {data.scale}")
    model = build_sr_model(sr_cfg)
    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=ADAM_BETAS)
    ema = EmaShadow({"sr": model}, cfg.ema_decay)
    data_rng = np.random.default_rng(cfg.seed + 1)
    _write_config(out_dir, {"stage": "train_sr", "train": asdict(cfg),
                            "model": asdict(sr_cfg)})
    log = _CsvLog(out_dir / "train_log.csv")
    try:
        for step in range(cfg.total_iters):
            lr_now = schedule_lr(cfg, step)
            for group in opt.param_groups:
                group["lr"] = lr_now
            lr_b, hr_b = data.sample_batch(cfg.batch_size, cfg.patch_size,
                                           data_rng)
            pred = model(lr_b).clamp(0.0, 1.0)
            total = (pred - hr_b).abs().mean()
            _abort_if_not_finite(total, step, {"l1": float(total.detach())})
            opt.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            ema.update()
            log.row(step, float(total.detach()), 0.0, lr_now)
    finally:
        log.close()
    ckpt = out_dir / "sr_pretrained.pt"
    save_sr(model, sr_cfg, ckpt, cfg.total_iters, ema_state=ema.state_dict())
    return {"checkpoint": str(ckpt), "log": str(out_dir / "train_log.csv")}


# ---------- stage two: self-supervised finetuning ----------

def _finetune_val_score(val_items, sr_model, stack, weights, ctrl_cfg,
                        ema: EmaShadow) -> float:
    """Reconstruction loss on the validation images under shadow weights,
    deterministic controller (no noise)."""
    ctrl = ControllerConfig(enabled=ctrl_cfg.enabled, noise=False,
                            invert=ctrl_cfg.invert)
    ema.apply_shadow()
    sr_model.eval()
    try:
        with torch.no_grad():
            scores = []
            for img in val_items:
                total, parts = finetune_loss(img[None], sr_model, stack,
                                             ctrl, weights)
                scores.append(parts["rec"])
    finally:
        sr_model.train()
        ema.restore()
    return float(np.mean(scores))


def finetune(cfg: TrainConfig, lrn_ckpt, sr_ckpt, lr_dir, out_dir) -> dict:
    """Adapt the SR model on unpaired LR images with the stack frozen.

    Writes sr_adapted.pt (best validation score), sr_final.pt (last
    iteration), train_log.csv, and config.json. The returned dict carries
    both checkpoint paths, the validation history, and the frozen stack's
    parameter hash before and after (they must match).
    """
    out_dir = Path(out_dir)
    deterministic = deterministic_requested(cfg)
    seed_everything(cfg.seed, deterministic)
    stack = load_lrn(lrn_ckpt, use_ema=True)
    stack.freeze()
    stack.eval()
    hash_before = lrn_hash(stack)
    model, sr_cfg = load_sr(sr_ckpt, use_ema=False)
    if model.scale != stack.scale:
        raise ValueError(f"sr scale {model.scale} != stack scale {stack.scale}")
    frozen = freeze_shallow(model, cfg.freeze_fraction)
    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ValueError("freeze fraction left no trainable parameters")
    data = UnpairedData(lr_dir, cfg.val_fraction)
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=ADAM_BETAS)
    ema = EmaShadow({"sr": model}, cfg.ema_decay)
    data_rng = np.random.default_rng(cfg.seed + 1)
    noise_rng = torch.Generator().manual_seed(cfg.seed + 2)
    weights = cfg.loss_weights()
    ctrl = cfg.controller_cfg()
    lr_patch = max(4, cfg.patch_size // stack.scale)
    _write_config(out_dir, {"stage": "finetune", "train": asdict(cfg),
                            "sr_model": asdict(sr_cfg),
                            "lrn_checkpoint": str(lrn_ckpt),
                            "frozen_tensors": frozen})
    log = _CsvLog(out_dir / "train_log.csv")
    val_history: list[tuple[int, float]] = []

    def snapshot():
        return ({k: v.clone() for k, v in model.state_dict().items()},
                ema.state_dict())

    tracker = BestTracker(cfg.early_stop_patience)
    score0 = _finetune_val_score(data.val_images(), model, stack,
                                 weights, ctrl, ema)
    val_history.append((0, score0))
    tracker.update(0, score0)
    best_state = snapshot()
    try:
        for step in range(cfg.total_iters):
            lr_now = schedule_lr(cfg, step)
            for group in opt.param_groups:
                group["lr"] = lr_now
            batch = data.sample_batch(cfg.batch_size, lr_patch, data_rng)
            total, parts = finetune_loss(batch, model, stack, ctrl, weights,
                                         rng=noise_rng)
            _abort_if_not_finite(total, step, parts)
            opt.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            ema.update()
            val_cell = ""
            stop = False
            if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.total_iters:
                score = _finetune_val_score(data.val_images(), model, stack,
                                            weights, ctrl, ema)
                val_history.append((step + 1, score))
                val_cell = score
                is_best, stop = tracker.update(step + 1, score)
                if is_best:
                    best_state = snapshot()
            log.row(step, parts["rec"], parts["far"], lr_now, val_cell)
            if stop:
                break
    finally:
        log.close()
    hash_after = lrn_hash(stack)
    final_path = out_dir / "sr_final.pt"
    save_sr(model, sr_cfg, final_path, cfg.total_iters,
            ema_state=ema.state_dict(),
            extra={"val_score": val_history[-1][1]})
    model.load_state_dict(best_state[0])
    ema.load_state_dict(best_state[1])
    best_path = out_dir / "sr_adapted.pt"
    save_sr(model, sr_cfg, best_path, tracker.best_step,
            ema_state=best_state[1], extra={"val_score": tracker.best_score})
    return {
        "checkpoint": str(best_path),
        "final_checkpoint": str(final_path),
        "log": str(out_dir / "train_log.csv"),
        "best_step": tracker.best_step,
        "best_val": tracker.best_score,
        "val_history": val_history,
        "lrn_hash_before": hash_before,
        "lrn_hash_after": hash_after,
    }


def sr_hash(model) -> str:
    return hash_state_dict(model.state_dict())
