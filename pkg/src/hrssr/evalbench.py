"""Evaluation harness and design studies: directory metric sweeps, the
reference-blend reconstruction study, the alignment-penalty shift
histogram, the controller-variant comparison, and the four-way design
ablation.

Every report carries aligned x/series data, validates finiteness, and is
regenerated bit-identically from the same seed and checkpoints: images
are visited in sorted-filename order and CSV formatting is fixed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np
import torch
from scipy import stats

from .controller import ControllerConfig, controller_batch, hqi, modulate
from .degrade import list_images
from .far import phi_far
from .imagedata import bicubic_resize, load_image, save_image
from .losses import LrnStack
from .metrics import MetricReport, MetricRow, PerceptualDistance, psnr, ssim
from .train import TrainConfig, finetune, load_sr

DEFAULT_RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)
VARIANT_LABELS = ("standard", "inverted")


@dataclass
class AblationReport:
    """One study's results: x-axis values plus named series aligned to
    them, with optional artifact paths and free-form extras."""

    experiment: str
    x_values: list
    series: dict[str, list[float]]
    csv_path: str | None = None
    plot_path: str | None = None
    extras: dict = field(default_factory=dict)

    def validate(self) -> None:
        n = len(self.x_values)
        for name, values in self.series.items():
            if len(values) != n:
                raise ValueError(
                    f"series {name!r} has {len(values)} values for {n} x-values")
            if not all(np.isfinite(v) for v in values):
                raise ValueError(f"series {name!r} contains non-finite values")

    def write_csv(self, path, x_label: str = "x") -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        names = sorted(self.series)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([x_label] + names)
            for i, x in enumerate(self.x_values):
                writer.writerow([x] + [f"{self.series[n][i]:.6f}"
                                       for n in names])
        self.csv_path = str(path)

    def write_plot(self, path, x_label: str = "x", y_label: str = "value",
                   title: str | None = None) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig, ax = plt.subplots(figsize=(6, 4))
        numeric_x = all(isinstance(x, (int, float)) for x in self.x_values)
        xs = self.x_values if numeric_x else range(len(self.x_values))
        for name in sorted(self.series):
            ax.plot(xs, self.series[name], marker="o", label=name)
        if not numeric_x:
            ax.set_xticks(list(xs))
            ax.set_xticklabels([str(x) for x in self.x_values])
        ax.set_xlabel(x_label)
        ax.set_ylabel(y_label)
        ax.set_title(title or self.experiment)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        self.plot_path = str(path)


# ---------- directory evaluation ----------

def evaluate_dir(pred_dir, gt_dir, out_csv=None,
                 perceptual: PerceptualDistance | None = None) -> MetricReport:
    """Score every prediction against the ground-truth file of the same
    basename; returns per-image rows plus the mean."""
    perceptual = perceptual or PerceptualDistance()
    preds = list_images(pred_dir)
    if not preds:
        raise FileNotFoundError(f"no images in {pred_dir}")
    gt_root = Path(gt_dir)
    rows = []
    for pred_path in preds:
        gt_path = gt_root / pred_path.name
        if not gt_path.exists():
            raise FileNotFoundError(f"no ground truth for {pred_path.name}")
        pred = load_image(pred_path)
        gt = load_image(gt_path)
        if pred.shape != gt.shape:
            raise ValueError(
                f"{pred_path.name}: shape {tuple(pred.shape)} vs "
                f"{tuple(gt.shape)}")
        rows.append(MetricRow(name=pred_path.name,
                              psnr=psnr(pred, gt),
                              ssim=ssim(pred, gt),
                              lpips=float(perceptual(pred, gt))))
    report = MetricReport(backend=perceptual.backend, rows=rows)
    if out_csv is not None:
        report.to_csv(out_csv)
    return report


# ---------- reconstruction helper ----------

def reconstruct(stack: LrnStack, x_lr: torch.Tensor, y: torch.Tensor,
                ctrl: ControllerConfig,
                rng: torch.Generator | None = None) -> torch.Tensor:
    """Regenerate the LR input from reference y: quality index from
    (x, y), controller applied to the degradation embedding, decoder run
    on the reference features. No gradients; output clamped."""
    with torch.no_grad():
        h = hqi(x_lr, y, stack.perceptual)
        s = controller_batch("pretrain", [h], stack.embed_dim, rng=rng,
                             cfg=ctrl)
        e_d = stack.e_deg(x_lr[None])
        e_im = stack.e_img(y[None])
        x_hat = stack.recon(modulate(e_d, s), e_im)
    return x_hat[0].clamp(0.0, 1.0)


# ---------- reference-blend study ----------

def interpolation_sweep(x, y_gt, lrn_with_s: LrnStack,
                        lrn_without_s: LrnStack,
                        ratios=DEFAULT_RATIOS,
                        out_dir=None) -> AblationReport:
    """Blend the clean reference toward the upsampled input,
    Y_i = i*up(x) + (1-i)*y_gt, and reconstruct the input from each blend
    with both stacks. Records PSNR and perceptual distance of the
    reconstruction against the true input per ratio, plus the rank
    correlation of ratio vs PSNR for each stack.

    x and y_gt may be single (C,H,W) tensors or equal-length sequences of
    pairs; metrics are averaged over pairs.
    """
    ratios = [float(r) for r in ratios]
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"ratio {r} outside [0, 1]")
    if isinstance(x, torch.Tensor):
        x, y_gt = [x], [y_gt]
    if len(x) != len(y_gt):
        raise ValueError("x and y_gt pair counts differ")
    ctrl_on = ControllerConfig(enabled=True, noise=False)
    ctrl_off = ControllerConfig(enabled=False, noise=False)
    stacks = {"with_s": (lrn_with_s, ctrl_on),
              "without_s": (lrn_without_s, ctrl_off)}
    series = {f"{m}_{k}": [] for k in stacks for m in ("psnr", "lpips")}
    perceptual = lrn_with_s.perceptual
    for ratio in ratios:
        sums = {key: 0.0 for key in series}
        for xi, yi in zip(x, y_gt):
            blend = blend_reference(xi, yi, ratio)
            for key, (stack, ctrl) in stacks.items():
                x_hat = reconstruct(stack, xi, blend, ctrl)
                sums[f"psnr_{key}"] += psnr(x_hat, xi)
                sums[f"lpips_{key}"] += float(perceptual(x_hat, xi))
        for key in series:
            series[key].append(sums[key] / len(x))
    extras = {}
    for key in stacks:
        res = stats.spearmanr(ratios, series[f"psnr_{key}"])
        rho = res.statistic if hasattr(res, "statistic") else res.correlation
        extras[f"spearman_psnr_{key}"] = float(rho)
    report = AblationReport(experiment="interpolation_sweep",
                            x_values=ratios, series=series, extras=extras)
    report.validate()
    if out_dir is not None:
        out_dir = Path(out_dir)
        report.write_csv(out_dir / "interpolation_sweep.csv", x_label="ratio")
        report.write_plot(out_dir / "interpolation_sweep.png",
                          x_label="blend ratio", y_label="metric")
    return report


def blend_reference(x: torch.Tensor, y_gt: torch.Tensor,
                    ratio: float) -> torch.Tensor:
    """Y_i = i*up(x) + (1-i)*y_gt; endpoints are exact."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio {ratio} outside [0, 1]")
    up = bicubic_resize(x, y_gt.shape[1], y_gt.shape[2])
    return ratio * up + (1.0 - ratio) * y_gt


# ---------- alignment-penalty shift study ----------

def far_shift_histogram(clean_dir, degraded_dirs: dict, stack: LrnStack,
                        bins: int = 20, out_dir=None) -> AblationReport:
    """Per-image alignment penalty for a clean corpus and each degraded
    corpus, binned on a shared grid. Series are bin counts; per-corpus
    means and raw values ride in extras."""
    corpora = {"clean": clean_dir, **degraded_dirs}
    values: dict[str, list[float]] = {}
    with torch.no_grad():
        for name, path in corpora.items():
            paths = list_images(path)
            if not paths:
                raise FileNotFoundError(f"corpus {name!r}: no images in {path}")
            values[name] = [
                float(phi_far(load_image(p)[None], stack.e_img,
                              stack.ref_encoder, stack.maps))
                for p in paths
            ]
    flat = [v for vs in values.values() for v in vs]
    lo, hi = min(flat), max(flat)
    if hi <= lo:
        hi = lo + 1e-6
    edges = np.linspace(lo, hi, bins + 1)
    centers = [float(c) for c in (edges[:-1] + edges[1:]) / 2.0]
    series = {}
    for name, vs in values.items():
        counts, _ = np.histogram(vs, bins=edges)
        series[name] = [float(c) for c in counts]
    report = AblationReport(
        experiment="far_shift_histogram", x_values=centers, series=series,
        extras={"means": {n: float(np.mean(vs)) for n, vs in values.items()},
                "values": values})
    report.validate()
    if out_dir is not None:
        out_dir = Path(out_dir)
        report.write_csv(out_dir / "far_shift_histogram.csv",
                         x_label="bin_center")
        report.write_plot(out_dir / "far_shift_histogram.png",
                          x_label="alignment penalty", y_label="count")
    return report


# ---------- SR inference and held-out scoring ----------

def run_sr(model, lr_dir, out_dir) -> list:
    """Write model outputs for every LR image, preserving basenames."""
    paths = list_images(lr_dir)
    if not paths:
        raise FileNotFoundError(f"no images in {lr_dir}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    written = []
    with torch.no_grad():
        for p in paths:
            x = load_image(p)
            y = model(x[None])[0].clamp(0.0, 1.0)
            target = out_dir / p.name
            save_image(y, target)
            written.append(target)
    return written


def score_checkpoint(sr_ckpt, heldout_lr_dir, heldout_gt_dir, work_dir,
                     perceptual: PerceptualDistance | None = None,
                     use_ema: bool = True) -> dict:
    """Run a checkpoint on held-out LR images and score against GT.
    Returns the mean metric row as a dict."""
    model, _ = load_sr(sr_ckpt, use_ema=use_ema)
    pred_dir = Path(work_dir) / "pred"
    run_sr(model, heldout_lr_dir, pred_dir)
    report = evaluate_dir(pred_dir, heldout_gt_dir, perceptual=perceptual)
    return {"psnr": report.mean_psnr, "ssim": report.mean_ssim,
            "lpips": report.mean_lpips}


# ---------- controller-variant comparison ----------

def controller_variant_compare(lrn_ckpt, sr_ckpt, lr_dir, heldout_lr_dir,
                               heldout_gt_dir, cfg: TrainConfig, out_dir,
                               variants=VARIANT_LABELS) -> AblationReport:
    """Finetune once per controller variant from identical starts and
    score each on held-out data. 'standard' targets the quality index
    itself; 'inverted' targets its complement."""
    out_dir = Path(out_dir)
    series = {"psnr": [], "ssim": [], "lpips": []}
    labels = []
    for idx, variant in enumerate(variants):
        if variant not in VARIANT_LABELS:
            raise ValueError(f"unknown variant {variant!r}")
        run_cfg = replace(cfg, controller_invert=(variant == "inverted"))
        run_dir = out_dir / f"variant_{idx}_{variant}"
        result = finetune(run_cfg, lrn_ckpt, sr_ckpt, lr_dir, run_dir)
        scores = score_checkpoint(result["checkpoint"], heldout_lr_dir,
                                  heldout_gt_dir, run_dir)
        labels.append(variant)
        for k in series:
            series[k].append(scores[k])
    report = AblationReport(experiment="controller_variant_compare",
                            x_values=labels, series=series)
    report.validate()
    report.write_csv(out_dir / "controller_variants.csv", x_label="variant")
    report.write_plot(out_dir / "controller_variants.png",
                      x_label="variant", y_label="metric")
    return report


# ---------- four-way design ablation ----------

ABLATION_ROWS = (
    ("controller+far", True, True),
    ("controller", True, False),
    ("far", False, True),
    ("neither", False, False),
)


def design_ablation(lrn_ckpt, sr_ckpt, lr_dir, heldout_lr_dir,
                    heldout_gt_dir, cfg: TrainConfig,
                    out_dir) -> AblationReport:
    """Finetune under the four on/off combinations of the controller and
    the alignment penalty, scoring each on held-out data."""
    out_dir = Path(out_dir)
    series = {"psnr": [], "ssim": [], "lpips": []}
    labels = []
    for name, ctrl_on, far_on in ABLATION_ROWS:
        run_cfg = replace(cfg, controller_enabled=ctrl_on,
                          lambda_far=cfg.lambda_far if far_on else 0.0)
        run_dir = out_dir / f"ablate_{name.replace('+', '_')}"
        result = finetune(run_cfg, lrn_ckpt, sr_ckpt, lr_dir, run_dir)
        scores = score_checkpoint(result["checkpoint"], heldout_lr_dir,
                                  heldout_gt_dir, run_dir)
        labels.append(name)
        for k in series:
            series[k].append(scores[k])
    report = AblationReport(experiment="design_ablation",
                            x_values=labels, series=series)
    report.validate()
    report.write_csv(out_dir / "design_ablation.csv", x_label="configuration")
    report.write_plot(out_dir / "design_ablation.png",
                      x_label="configuration", y_label="metric")
    return report
