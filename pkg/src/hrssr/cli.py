"""Command-line entry point.

Subcommands: synth-data, pretrain, train-sr, finetune, sr, evaluate, ablate
(interp | far-hist | controller). Hyperparameters come from an optional
flat config file of `section.key = value` lines plus repeatable
`--set section.key=value` flags; flags win. Every run directory receives a
run_manifest.json capturing the effective config, seeds, checkpoint hashes,
backend identifiers, and artifact paths. Exit codes: 0 success, 1 usage
error, 2 runtime failure. HRSSR_DETERMINISTIC=1 forces deterministic mode.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

from . import evalbench
from .degrade import VALID_SCALES, synth_bicubic_dataset, synth_dataset
from .models import LrnConfig, SrConfig
from .train import (TrainConfig, deterministic_requested, finetune, load_sr,
                    pretrain, train_sr)


# ---------- config plumbing ----------

def coerce_value(raw: str):
    text = raw.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_file(path) -> dict[str, object]:
    """Flat `section.key = value` lines; '#' starts a comment."""
    pairs: dict[str, object] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(
                    f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, raw = stripped.partition("=")
            pairs[key.strip()] = coerce_value(raw)
    return pairs


def parse_set_flags(flags) -> dict[str, object]:
    pairs: dict[str, object] = {}
    for item in flags or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        pairs[key.strip()] = coerce_value(raw)
    return pairs


_SECTION_FIELDS = {
    "train": {f.name for f in dataclasses.fields(TrainConfig)},
    "model": {f.name for f in dataclasses.fields(LrnConfig)},
    "sr": {f.name for f in dataclasses.fields(SrConfig)},
    "controller": {"enabled", "noise", "invert"},
    "loss": {"lambda_l1", "lambda_perceptual", "lambda_far", "hf_weighting"},
}


def route_pairs(pairs: dict) -> tuple[dict, dict, dict]:
    """Split `section.key` pairs into TrainConfig / LrnConfig / SrConfig
    keyword dicts, validating every key."""
    train_kv: dict = {}
    model_kv: dict = {}
    sr_kv: dict = {}
    for key, value in pairs.items():
        section, _, name = key.partition(".")
        if not name:
            raise ValueError(
                f"config key {key!r} must look like 'section.name'")
        if section not in _SECTION_FIELDS:
            raise ValueError(f"unknown config section {section!r} in {key!r}")
        if name not in _SECTION_FIELDS[section]:
            raise ValueError(f"unknown config key {key!r}")
        if section == "train":
            train_kv[name] = value
        elif section == "controller":
            train_kv[f"controller_{name}"] = value
        elif section == "loss":
            train_kv[name] = value
        elif section == "model":
            model_kv[name] = value
        elif section == "sr":
            sr_kv[name] = value
    return train_kv, model_kv, sr_kv


def build_configs(stage: str, args) -> tuple[TrainConfig, LrnConfig, SrConfig]:
    pairs: dict = {}
    if getattr(args, "config", None):
        pairs.update(parse_config_file(args.config))
    pairs.update(parse_set_flags(getattr(args, "set", None)))
    train_kv, model_kv, sr_kv = route_pairs(pairs)
    if getattr(args, "seed", None) is not None:
        train_kv["seed"] = args.seed
    if stage == "finetune":
        cfg = TrainConfig.finetune_defaults(**train_kv)
    elif stage == "pretrain":
        cfg = TrainConfig.pretrain_defaults(**train_kv)
    else:
        cfg = TrainConfig(**train_kv)
    return cfg, LrnConfig(**model_kv), SrConfig(**sr_kv)


# ---------- run manifests ----------

def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Reproducibility record for one run directory: written atomically
    when the run starts and finalized when it ends."""

    def __init__(self, out_dir, command: str, config: dict,
                 seeds: dict | None = None):
        self.path = Path(out_dir) / "run_manifest.json"
        self.data = {
            "command": command,
            "config": config,
            "seeds": seeds or {},
            "checkpoint_hashes": {},
            "backends": {},
            "started_at": _utc_now(),
            "finished_at": None,
            "artifacts": [],
            "status": "running",
            "deterministic": deterministic_requested(),
        }
        self._write()

    def _write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.path.parent, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True, default=str)
        os.replace(tmp, self.path)

    def add_checkpoint(self, label: str, path) -> None:
        self.data["checkpoint_hashes"][label] = file_sha256(path)

    def add_artifact(self, path) -> None:
        self.data["artifacts"].append(str(path))

    def finalize(self, status: str = "done", **extra) -> None:
        self.data.update(extra)
        self.data["status"] = status
        self.data["finished_at"] = _utc_now()
        self._write()


def _print_effective(command: str, payload: dict) -> None:
    print(json.dumps({"command": command, "config": payload},
                     indent=2, sort_keys=True, default=str))


# ---------- subcommand handlers ----------

def cmd_synth_data(args) -> int:
    if args.dry_run:
        _print_effective("synth-data", vars(args))
        return 0
    manifest = RunManifest(args.out, "synth-data",
                           {"hr_dir": str(args.hr_dir), "scale": args.scale,
                            "count": args.count, "bicubic": args.bicubic},
                           seeds={"seed": args.seed})
    if args.bicubic:
        path = synth_bicubic_dataset(args.hr_dir, args.out, args.scale)
    else:
        path = synth_dataset(args.hr_dir, args.out, args.scale, args.count,
                             args.seed)
    manifest.add_artifact(path)
    manifest.finalize()
    print(f"wrote {path}")
    return 0


def cmd_pretrain(args) -> int:
    cfg, model_cfg, _ = build_configs("pretrain", args)
    effective = {"train": asdict(cfg), "model": asdict(model_cfg),
                 "manifest": str(args.manifest)}
    if args.dry_run:
        _print_effective("pretrain", effective)
        return 0
    manifest = RunManifest(args.out, "pretrain", effective,
                           seeds={"train.seed": cfg.seed})
    manifest.data["backends"]["reference_encoder"] = model_cfg.ref_mode
    result = pretrain(cfg, args.manifest, args.out, model_cfg=model_cfg)
    manifest.add_checkpoint("lrn_final", result["checkpoint"])
    manifest.add_artifact(result["checkpoint"])
    manifest.add_artifact(result["log"])
    manifest.finalize(state_hash=result["hash"])
    print(f"wrote {result['checkpoint']}")
    return 0


def cmd_train_sr(args) -> int:
    cfg, _, sr_cfg = build_configs("train-sr", args)
    effective = {"train": asdict(cfg), "sr": asdict(sr_cfg),
                 "manifest": str(args.manifest)}
    if args.dry_run:
        _print_effective("train-sr", effective)
        return 0
    manifest = RunManifest(args.out, "train-sr", effective,
                           seeds={"train.seed": cfg.seed})
    result = train_sr(cfg, args.manifest, args.out, sr_cfg=sr_cfg)
    manifest.add_checkpoint("sr_pretrained", result["checkpoint"])
    manifest.add_artifact(result["checkpoint"])
    manifest.add_artifact(result["log"])
    manifest.finalize()
    print(f"wrote {result['checkpoint']}")
    return 0


def cmd_finetune(args) -> int:
    cfg, _, _ = build_configs("finetune", args)
    effective = {"train": asdict(cfg), "lrn": str(args.lrn),
                 "sr": str(args.sr), "lr_dir": str(args.lr_dir)}
    if args.dry_run:
        _print_effective("finetune", effective)
        return 0
    manifest = RunManifest(args.out, "finetune", effective,
                           seeds={"train.seed": cfg.seed})
    manifest.add_checkpoint("lrn_in", args.lrn)
    manifest.add_checkpoint("sr_in", args.sr)
    result = finetune(cfg, args.lrn, args.sr, args.lr_dir, args.out)
    manifest.add_checkpoint("sr_adapted", result["checkpoint"])
    manifest.add_checkpoint("sr_final", result["final_checkpoint"])
    for key in ("checkpoint", "final_checkpoint", "log"):
        manifest.add_artifact(result[key])
    manifest.finalize(best_step=result["best_step"],
                      best_val=result["best_val"],
                      lrn_hash_before=result["lrn_hash_before"],
                      lrn_hash_after=result["lrn_hash_after"])
    print(f"wrote {result['checkpoint']} (best step {result['best_step']})")
    return 0


def cmd_sr(args) -> int:
    if args.dry_run:
        _print_effective("sr", vars(args))
        return 0
    model, sr_cfg = load_sr(args.checkpoint, use_ema=not args.no_ema)
    manifest = RunManifest(args.out, "sr",
                           {"checkpoint": str(args.checkpoint),
                            "lr_dir": str(args.lr_dir),
                            "ema": not args.no_ema,
                            "scale": sr_cfg.scale})
    manifest.add_checkpoint("sr_in", args.checkpoint)
    written = evalbench.run_sr(model, args.lr_dir, args.out)
    for p in written:
        manifest.add_artifact(p)
    manifest.finalize()
    print(f"wrote {len(written)} images to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    if args.dry_run:
        _print_effective("evaluate", vars(args))
        return 0
    out = Path(args.out)
    manifest = RunManifest(out, "evaluate",
                           {"pred_dir": str(args.pred_dir),
                            "gt_dir": str(args.gt_dir)})
    report = evalbench.evaluate_dir(args.pred_dir, args.gt_dir,
                                    out_csv=out / "scores.csv")
    manifest.data["backends"]["perceptual"] = report.backend
    manifest.add_artifact(out / "scores.csv")
    manifest.finalize(mean_psnr=report.mean_psnr, mean_ssim=report.mean_ssim,
                      mean_lpips=report.mean_lpips)
    print(f"psnr {report.mean_psnr:.4f}  ssim {report.mean_ssim:.4f}  "
          f"lpips {report.mean_lpips:.4f}")
    return 0


def _report_artifacts(manifest: RunManifest, report) -> None:
    for path in (report.csv_path, report.plot_path):
        if path:
            manifest.add_artifact(path)


def cmd_ablate_interp(args) -> int:
    from .degrade import read_manifest
    from .imagedata import load_image
    from .train import load_lrn
    ratios = [float(r) for r in args.ratios.split(",")]
    if args.dry_run:
        _print_effective("ablate interp", {**vars(args), "ratios": ratios})
        return 0
    manifest = RunManifest(args.out, "ablate interp",
                           {"lrn_with_s": str(args.lrn_with_s),
                            "lrn_without_s": str(args.lrn_without_s),
                            "manifest": str(args.manifest),
                            "ratios": ratios, "pairs": args.pairs})
    manifest.add_checkpoint("lrn_with_s", args.lrn_with_s)
    manifest.add_checkpoint("lrn_without_s", args.lrn_without_s)
    rows = read_manifest(args.manifest)[: args.pairs]
    xs = [load_image(r["lr_path"]) for r in rows]
    ys = [load_image(r["hr_path"]) for r in rows]
    report = evalbench.interpolation_sweep(
        xs, ys, load_lrn(args.lrn_with_s), load_lrn(args.lrn_without_s),
        ratios=ratios, out_dir=args.out)
    _report_artifacts(manifest, report)
    manifest.finalize(**report.extras)
    for key, value in sorted(report.extras.items()):
        print(f"{key} = {value:.4f}")
    return 0


def cmd_ablate_far_hist(args) -> int:
    from .train import load_lrn
    degraded = {}
    for item in args.degraded:
        if "=" not in item:
            raise ValueError(f"--degraded expects name=dir, got {item!r}")
        name, _, path = item.partition("=")
        degraded[name.strip()] = path.strip()
    if args.dry_run:
        _print_effective("ablate far-hist", vars(args))
        return 0
    manifest = RunManifest(args.out, "ablate far-hist",
                           {"lrn": str(args.lrn),
                            "clean_dir": str(args.clean_dir),
                            "degraded": degraded, "bins": args.bins})
    manifest.add_checkpoint("lrn", args.lrn)
    report = evalbench.far_shift_histogram(args.clean_dir, degraded,
                                           load_lrn(args.lrn),
                                           bins=args.bins, out_dir=args.out)
    _report_artifacts(manifest, report)
    manifest.finalize(means=report.extras["means"])
    for name, mean in sorted(report.extras["means"].items()):
        print(f"mean[{name}] = {mean:.6f}")
    return 0


def cmd_ablate_controller(args) -> int:
    cfg, _, _ = build_configs("finetune", args)
    if args.dry_run:
        _print_effective("ablate controller",
                         {**vars(args), "train": asdict(cfg)})
        return 0
    manifest = RunManifest(args.out, "ablate controller",
                           {"train": asdict(cfg), "lrn": str(args.lrn),
                            "sr": str(args.sr)},
                           seeds={"train.seed": cfg.seed})
    manifest.add_checkpoint("lrn", args.lrn)
    manifest.add_checkpoint("sr", args.sr)
    report = evalbench.controller_variant_compare(
        args.lrn, args.sr, args.lr_dir, args.heldout_lr, args.heldout_gt,
        cfg, args.out)
    _report_artifacts(manifest, report)
    manifest.finalize(variants=report.x_values, series=report.series)
    for i, label in enumerate(report.x_values):
        cells = "  ".join(f"{k} {report.series[k][i]:.4f}"
                          for k in sorted(report.series))
        print(f"{label}: {cells}")
    return 0


# ---------- parser ----------

class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this tool reserves 2 for runtime
    failures, so usage errors exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser, config: bool = True) -> None:
    p.add_argument("--dry-run", action="store_true",
                   help="validate and print the effective config, then exit")
    if config:
        p.add_argument("--config", type=Path,
                       help="flat 'section.key = value' config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable; wins over "
                            "--config)")
        p.add_argument("--seed", type=int, help="override train.seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hrssr",
                     description="Self-supervised real-world super-resolution "
                                 "toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser,
                                required=True)

    p = sub.add_parser("synth-data", help="degrade an HR pool into an "
                                          "LR/HR training set")
    p.add_argument("--hr-dir", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--scale", type=int, default=4, choices=sorted(VALID_SCALES))
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bicubic", action="store_true",
                   help="plain bicubic pairs instead of the degradation "
                        "pipeline")
    _add_common(p, config=False)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain", help="train the reconstruction stack on "
                                        "synthetic pairs")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-sr", help="supervised pretraining of the "
                                        "stand-in SR model")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    _add_common(p)
    p.set_defaults(func=cmd_train_sr)

    p = sub.add_parser("finetune", help="adapt an SR model on unpaired LR "
                                        "images")
    p.add_argument("--lrn", required=True, type=Path)
    p.add_argument("--sr", required=True, type=Path)
    p.add_argument("--lr-dir", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    _add_common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sr", help="run an SR checkpoint over a directory")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--lr-dir", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--no-ema", action="store_true",
                   help="use raw weights instead of the shadow weights")
    _add_common(p, config=False)
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("evaluate", help="score predictions against ground "
                                        "truth")
    p.add_argument("--pred-dir", required=True, type=Path)
    p.add_argument("--gt-dir", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    _add_common(p, config=False)
    p.set_defaults(func=cmd_evaluate)

    ab = sub.add_parser("ablate", help="design studies")
    absub = ab.add_subparsers(dest="study", parser_class=_Parser,
                              required=True)

    p = absub.add_parser("interp", help="reconstruction quality vs "
                                        "reference-blend ratio")
    p.add_argument("--lrn-with-s", required=True, type=Path)
    p.add_argument("--lrn-without-s", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--ratios", default="0,0.25,0.5,0.75,1")
    p.add_argument("--pairs", type=int, default=8)
    _add_common(p, config=False)
    p.set_defaults(func=cmd_ablate_interp)

    p = absub.add_parser("far-hist", help="alignment-penalty distribution "
                                          "shift under degradations")
    p.add_argument("--lrn", required=True, type=Path)
    p.add_argument("--clean-dir", required=True, type=Path)
    p.add_argument("--degraded", action="append", required=True,
                   metavar="NAME=DIR")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--bins", type=int, default=20)
    _add_common(p, config=False)
    p.set_defaults(func=cmd_ablate_far_hist)

    p = absub.add_parser("controller", help="finetune under both controller "
                                            "variants and compare")
    p.add_argument("--lrn", required=True, type=Path)
    p.add_argument("--sr", required=True, type=Path)
    p.add_argument("--lr-dir", required=True, type=Path)
    p.add_argument("--heldout-lr", required=True, type=Path)
    p.add_argument("--heldout-gt", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    _add_common(p)
    p.set_defaults(func=cmd_ablate_controller)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, NotADirectoryError, KeyError,
            RuntimeError, OSError, TypeError) as exc:
        print(f"hrssr: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
