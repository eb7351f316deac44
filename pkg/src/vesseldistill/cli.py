"""Command-line surface: corpus generation, training, evaluation, reporting.

Subcommands: gen-data, train-teacher, train-scratch, distill, eval, report.
Option precedence is flag > config file > built-in default; config files
are flat `key=value` lines (# comments allowed).  Every run directory
gets a run_manifest.json with the fully resolved configuration, enough
to reproduce the run exactly.

Exit codes: 0 success, 2 usage error, 3 data/configuration error,
4 numeric failure (training divergence).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import __version__
from .errors import (CheckpointError, ConfigError, NumericError)
from .synthdata import SynthConfig, load_corpus, save_corpus
from .train import (TrainConfig, build_from_checkpoint, config_hash,
                    load_checkpoint, run_training)
from .evaluate import (evaluate_model, read_metrics_csv, render_overlay,
                       write_metrics_csv, write_report)

_BOOL_WORDS = {"1": True, "0": False, "true": True, "false": False,
               "yes": True, "no": False}


def _parse_config_file(path: Path) -> dict:
    """Flat key=value file -> dict of raw strings."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def _convert_train_value(key: str, raw):
    if not isinstance(raw, str):
        return raw
    if key == "tap_levels":
        if raw.lower() in ("", "none", "all"):
            return None
        return tuple(int(part) for part in raw.replace(" ", "").split(","))
    default = getattr(TrainConfig(), key)
    if isinstance(default, bool):
        try:
            return _BOOL_WORDS[raw.lower()]
        except KeyError:
            raise ConfigError(f"cannot parse boolean {key}={raw!r}") from None
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    """Merge dataclass defaults, config file, then explicit flags."""
    merged = asdict(TrainConfig())
    file_path = getattr(args, "config", None)
    if file_path:
        for key, raw in _parse_config_file(Path(file_path)).items():
            if key not in merged:
                raise ConfigError(f"unknown config key {key!r} in {file_path}")
            merged[key] = _convert_train_value(key, raw)
    for key in merged:
        if hasattr(args, key):  # SUPPRESS defaults: present only if user passed it
            merged[key] = _convert_train_value(key, getattr(args, key))
    cfg = TrainConfig(**merged)
    cfg.validate()
    return cfg


def _check_out_dir(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(
            f"output directory {out} is not empty; pass --force to write anyway")


class _RunLock:
    """Exclusive per-run-directory lock file; refuses concurrent runs."""

    def __init__(self, out: Path):
        self.path = Path(out) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"run directory is locked by another invocation ({self.path}); "
                f"remove the file if no run is active") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _write_manifest(out: Path, payload: dict) -> None:
    tmp = out / "run_manifest.json.tmp"
    tmp.write_text(json.dumps(payload, indent=1, sort_keys=True, default=str))
    tmp.replace(out / "run_manifest.json")


def _manifest_skeleton(command: str, argv: list[str]) -> dict:
    return {"command": command,
            "argv": argv,
            "package_version": __version__,
            "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}


def _finish_manifest(out: Path, manifest: dict, status: str) -> None:
    manifest["finished_utc"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    manifest["status"] = status
    _write_manifest(out, manifest)


def cmd_gen_data(args, argv) -> int:
    out = Path(args.out)
    _check_out_dir(out, args.force)
    overrides = {}
    if args.config:
        raw = _parse_config_file(Path(args.config))
        range_keys = {
            "vessel_width_min": ("vessel_width_range", 0), "vessel_width_max": ("vessel_width_range", 1),
            "contrast_min": ("contrast_range", 0), "contrast_max": ("contrast_range", 1),
            "branch_min": ("branch_count_range", 0), "branch_max": ("branch_count_range", 1),
        }
        ranges = {}
        for key, value in raw.items():
            if key in ("patch_size", "grid", "train_fraction"):
                overrides[key] = float(value) if key == "train_fraction" else int(value)
            elif key in range_keys:
                field_name, pos = range_keys[key]
                ranges.setdefault(field_name, {})[pos] = float(value)
            elif key in ("seed", "canvas_size", "n_images"):
                overrides[key] = int(value)
            elif key == "clutter_level":
                overrides[key] = float(value)
            else:
                raise ConfigError(f"unknown gen-data config key {key!r}")
        base = SynthConfig()
        for field_name, parts in ranges.items():
            current = list(getattr(base, field_name))
            for pos, value in parts.items():
                current[pos] = int(value) if field_name == "branch_count_range" else value
            overrides[field_name] = tuple(current)

    def flag(name, cast):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = cast(value)

    flag("seed", int)
    flag("n_images", int)
    flag("canvas_size", int)
    flag("clutter_level", float)
    if args.vessel_width_min is not None or args.vessel_width_max is not None:
        lo, hi = SynthConfig().vessel_width_range
        overrides["vessel_width_range"] = (
            args.vessel_width_min if args.vessel_width_min is not None else lo,
            args.vessel_width_max if args.vessel_width_max is not None else hi)
    if args.contrast_min is not None or args.contrast_max is not None:
        lo, hi = SynthConfig().contrast_range
        overrides["contrast_range"] = (
            args.contrast_min if args.contrast_min is not None else lo,
            args.contrast_max if args.contrast_max is not None else hi)

    patch_size = args.patch_size if args.patch_size is not None else overrides.pop("patch_size", 256)
    grid_n = args.grid if args.grid is not None else overrides.pop("grid", 4)
    train_fraction = (args.train_fraction if args.train_fraction is not None
                      else overrides.pop("train_fraction", 5.0 / 6.0))
    cfg = replace(SynthConfig(), **overrides)
    cfg.validate()

    manifest = _manifest_skeleton("gen-data", argv)
    manifest["config"] = {**asdict(cfg), "patch_size": patch_size,
                          "grid": [grid_n, grid_n], "train_fraction": train_fraction}
    with _RunLock(out):
        try:
            corpus = save_corpus(out, cfg, train_fraction, patch_size=patch_size,
                                 grid=(grid_n, grid_n))
        except Exception as exc:
            _finish_manifest(out, manifest, f"error: {exc}")
            raise
        manifest["outputs"] = {"corpus": str(out),
                               "parents": len(corpus["parents"]),
                               "patches": len(corpus["patches"])}
        _finish_manifest(out, manifest, "ok")
    print(f"wrote {len(corpus['parents'])} parent images / "
          f"{len(corpus['patches'])} patches to {out}")
    return 0


def _print_config(cfg: TrainConfig) -> None:
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        print(f"{f.name}={value}")


def _run_train_command(args, argv, mode: str) -> int:
    cfg = _resolve_train_config(args)
    forced_variant = getattr(args, "student_variant", None)
    cfg = replace(cfg, mode=mode,
                  **({"student_variant": forced_variant} if forced_variant else {}))
    if mode == "distill":
        cfg = replace(cfg, mode=getattr(args, "kd_mode", None) or "distill")
    cfg.validate()
    if args.print_config:
        _print_config(cfg)
        return 0
    out = Path(args.out)
    _check_out_dir(out, args.force)
    split, _ = load_corpus(Path(args.data))
    teacher_ckpt = getattr(args, "teacher_ckpt", None)
    manifest = _manifest_skeleton(args.command, argv)
    manifest["config"] = {**asdict(cfg), "config_hash": config_hash(cfg)}
    manifest["inputs"] = {"data": str(args.data),
                          "teacher_ckpt": str(teacher_ckpt) if teacher_ckpt else None}
    with _RunLock(out):
        try:
            summary = run_training(cfg, split, out,
                                   teacher_ckpt=Path(teacher_ckpt) if teacher_ckpt else None)
        except Exception as exc:
            _finish_manifest(out, manifest, f"error: {exc}")
            raise
        manifest["outputs"] = summary
        _finish_manifest(out, manifest, "ok")
    print(f"{cfg.mode} run finished: best val mIOU "
          f"{summary['best_val_miou']:.4f} ({summary['best_checkpoint']})")
    return 0


def cmd_eval(args, argv) -> int:
    ckpt_path = Path(args.ckpt)
    payload = load_checkpoint(ckpt_path)
    net = build_from_checkpoint(payload)
    device = args.device or os.environ.get("VESSELDISTILL_DEVICE", "") or "cpu"
    net.to(device)
    split, _ = load_corpus(Path(args.data))
    samples = split.test if args.split == "test" else split.train
    out = Path(args.out) if args.out else ckpt_path.parent
    out.mkdir(parents=True, exist_ok=True)
    meta = {"checkpoint": ckpt_path.name,
            "variant": payload["spec"].variant,
            "mode": payload.get("meta", {}).get("mode", ""),
            "config_hash": payload.get("meta", {}).get("config_hash", ""),
            "split": args.split,
            "threshold": args.threshold}
    report = evaluate_model(net, samples, threshold=args.threshold,
                            device=device, meta=meta)
    csv_path = write_metrics_csv(out / "metrics.csv", [report])
    n_overlays = min(args.overlays, len(samples))
    for i in range(n_overlays):
        import torch
        with torch.no_grad():
            x = torch.as_tensor(samples[i].image,
                                dtype=next(net.parameters()).dtype)
            pred, _ = net(x.unsqueeze(0).unsqueeze(0).to(device))
        render_overlay(samples[i], pred.squeeze().cpu().numpy(),
                       out / f"overlay_{samples[i].id}.png",
                       threshold=args.threshold)
    manifest = _manifest_skeleton("eval", argv)
    manifest["inputs"] = {"ckpt": str(ckpt_path), "data": str(args.data)}
    manifest["config"] = meta
    manifest["outputs"] = {"metrics_csv": str(csv_path), "overlays": n_overlays}
    _finish_manifest(out, manifest, "ok")
    print(f"acc={report.acc:.4f} se={report.se:.4f} auc={report.auc:.4f} "
          f"miou={report.miou:.4f} f1={report.f1:.4f} "
          f"flops={report.flops} params={report.params}")
    return 0


def cmd_report(args, argv) -> int:
    rows = []
    for path in args.metrics:
        rows.extend(read_metrics_csv(Path(path)))
    if not rows:
        raise ConfigError("no rows found in the given metrics files")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, rows)
    print(out.read_text())
    return 0


def _add_train_flags(p: argparse.ArgumentParser, with_variant: bool) -> None:
    p.add_argument("--data", required=True, help="corpus directory (from gen-data)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty directory")
    p.add_argument("--print-config", action="store_true",
                   help="print the resolved configuration and exit")
    if with_variant:
        p.add_argument("--student-variant", dest="student_variant",
                       default=argparse.SUPPRESS,
                       choices=("student_mobile", "student_enet", "student_erfnet"))
    # TrainConfig passthrough flags; SUPPRESS marks "user really set it"
    for flag, kwargs in (
            ("--seed", {"type": int}),
            ("--lr", {"type": float}),
            ("--epochs", {"type": int}),
            ("--batch-size", {"type": int, "dest": "batch_size"}),
            ("--net-size", {"dest": "net_size", "choices": ("full", "tiny")}),
            ("--tap-levels", {"dest": "tap_levels"}),
            ("--w-ce", {"type": float, "dest": "w_ce"}),
            ("--w-fsd", {"type": float, "dest": "w_fsd"}),
            ("--w-asd", {"type": float, "dest": "w_asd"}),
            ("--w-rec", {"type": float, "dest": "w_rec"}),
            ("--kd-weight", {"type": float, "dest": "kd_weight"}),
            ("--temperature", {"type": float}),
            ("--optimizer", {"choices": ("adam", "sgd")}),
            ("--lr-schedule", {"dest": "lr_schedule", "choices": ("constant", "cosine")}),
            ("--similarity", {"choices": ("outer", "direct")}),
            ("--loss-reduction", {"dest": "loss_reduction", "choices": ("mean", "raw")}),
            ("--augment", {"dest": "augment"}),
            ("--threshold", {"type": float}),
            ("--precision", {"type": int, "choices": (32, 64)}),
            ("--device", {}),
    ):
        p.add_argument(flag, default=argparse.SUPPRESS, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vesseldistill",
        description="Similarity-distillation training for lightweight vessel segmentation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--out", required=True, help="corpus output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-images", dest="n_images", type=int)
    g.add_argument("--canvas-size", dest="canvas_size", type=int)
    g.add_argument("--patch-size", dest="patch_size", type=int)
    g.add_argument("--grid", type=int, help="patch grid is grid x grid")
    g.add_argument("--train-fraction", dest="train_fraction", type=float)
    g.add_argument("--clutter-level", dest="clutter_level", type=float)
    g.add_argument("--vessel-width-min", dest="vessel_width_min", type=float)
    g.add_argument("--vessel-width-max", dest="vessel_width_max", type=float)
    g.add_argument("--contrast-min", dest="contrast_min", type=float)
    g.add_argument("--contrast-max", dest="contrast_max", type=float)
    g.add_argument("--config", help="flat key=value config file")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-teacher", help="train the attention U-Net teacher")
    _add_train_flags(t, with_variant=False)
    t.set_defaults(func=lambda a, v: _run_train_command(a, v, "teacher"))

    s = sub.add_parser("train-scratch", help="train a student without distillation")
    _add_train_flags(s, with_variant=True)
    s.set_defaults(func=lambda a, v: _run_train_command(a, v, "scratch"))

    d = sub.add_parser("distill", help="train a student against a frozen teacher")
    _add_train_flags(d, with_variant=True)
    d.add_argument("--teacher-ckpt", dest="teacher_ckpt", required=True,
                   help="teacher checkpoint produced by train-teacher")
    d.add_argument("--mode", dest="kd_mode",
                   choices=("distill", "softkd", "fsd_only"),
                   help="distillation variant (default distill)")
    d.set_defaults(func=lambda a, v: _run_train_command(a, v, "distill"))

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="directory for metrics.csv (default: next to ckpt)")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--overlays", type=int, default=0,
                   help="write this many overlay images")
    e.add_argument("--device", default="")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="aggregate metrics.csv files into one table")
    r.add_argument("metrics", nargs="+", help="metrics.csv files")
    r.add_argument("--out", required=True, help="output markdown file")
    r.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except (ConfigError, CheckpointError, FileNotFoundError,
            json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
