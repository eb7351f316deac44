"""Training loops for teacher, plain students and distilled students.

All randomness (init, data order, augmentation choice) is derived from
TrainConfig.seed through independent streams, so two runs with the same
config produce the same loss curve, and runs that differ only in `mode`
see the identical batch/augmentation sequence.

The distillation step: teacher forward without gradients, student
forward, project every tap of both networks, per-tap latent similarity
feeds the feature-similarity loss, per-prediction Euclidean distance to
ground truth feeds the distance-matching loss, cross-entropy on the
student, and the projector reconstruction term (whose gradients stop at
the pooled features) — one optimizer step over student plus all
projectors.  Teacher-side projectors train on reconstruction only,
because the losses detach every teacher-side input.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import synthdata
from .distill import (LossWeights, Projector, asd_loss, ce_loss,
                      euclidean_similarity, fsd_loss, latent_similarity,
                      pool_features, reconstruction_loss, softkd_loss,
                      CLAMP_EPS)
from .errors import (CheckpointCorruptError, CheckpointIncompatibleError,
                     ConfigError, DegenerateLatentError, NumericError)
from .evaluate import evaluate_model
from .nets import NetworkSpec, build_network, init_parameters, preset

MODES = ("teacher", "scratch", "distill", "softkd", "fsd_only")
_DISTILL_MODES = ("distill", "softkd", "fsd_only")

# Independent seed streams.
_ORDER_STREAM = 0x07DE  # data order per epoch
_AUG_STREAM = 0xA17     # augmentation transform choice
_PROJ_STREAM = 0x9201   # projector init

LOG_COLUMNS = ("epoch", "ce", "fsd", "asd", "rec", "kd", "total",
               "val_acc", "val_se", "val_auc", "val_miou", "val_f1",
               "wall_time_s")


@dataclass(frozen=True)
class TrainConfig:
    """Flat, CLI-friendly description of one training run."""

    mode: str = "scratch"
    student_variant: str = "student_mobile"
    net_size: str = "full"
    tap_levels: tuple[int, ...] | None = None
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    w_ce: float = 1.0
    w_fsd: float = 1.0
    w_asd: float = 1.0
    w_rec: float = 1.0
    kd_weight: float = 1.0
    temperature: float = 4.0
    optimizer: str = "adam"
    lr_schedule: str = "constant"
    similarity: str = "outer"
    loss_reduction: str = "mean"
    augment: bool = True
    threshold: float = 0.5
    precision: int = 32
    device: str = ""   # "" -> $VESSELDISTILL_DEVICE or cpu
    keep_epoch_checkpoints: bool = False

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.similarity not in ("outer", "direct"):
            raise ConfigError(f"similarity must be outer or direct, got {self.similarity!r}")
        if self.loss_reduction not in ("mean", "raw"):
            raise ConfigError(f"loss_reduction must be mean or raw, got {self.loss_reduction!r}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.kd_weight < 0:
            raise ConfigError(f"kd_weight must be >= 0, got {self.kd_weight}")
        self.loss_weights().validate()

    def loss_weights(self) -> LossWeights:
        w_asd = 0.0 if self.mode == "fsd_only" else self.w_asd
        return LossWeights(w_ce=self.w_ce, w_fsd=self.w_fsd,
                           w_asd=w_asd, w_rec=self.w_rec)


def config_hash(cfg: TrainConfig) -> str:
    payload = asdict(cfg)
    if payload.get("tap_levels") is not None:
        payload["tap_levels"] = list(payload["tap_levels"])
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def resolve_device(cfg: TrainConfig) -> str:
    return cfg.device or os.environ.get("VESSELDISTILL_DEVICE", "") or "cpu"


def state_checksum(state: dict) -> str:
    """Content hash over named tensors (sorted by name): order-independent proof
    that two parameter sets are bit-identical."""
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: Path, net, *, epoch: int = 0, step: int = 0,
                    meta: dict | None = None) -> str:
    """Single-file checkpoint: spec + named arrays + content checksum.

    Written atomically (tmp + rename); returns the checksum.
    """
    path = Path(path)
    spec = net.spec
    state = {k: v.detach().cpu() for k, v in net.state_dict().items()}
    checksum = state_checksum(state)
    payload = {
        "format_version": 1,
        "spec": {"variant": spec.variant, "depth": spec.depth,
                 "base_channels": spec.base_channels,
                 "tap_levels": list(spec.tap_levels)},
        "epoch": int(epoch),
        "step": int(step),
        "meta": dict(meta or {}),
        "state": state,
        "checksum": checksum,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return checksum


def load_checkpoint(path: Path) -> dict:
    """Load and verify a checkpoint; corrupt or truncated files fail loudly."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointCorruptError(f"cannot read checkpoint {path}: {exc}") from exc
    for key in ("spec", "state", "checksum", "epoch", "step"):
        if key not in payload:
            raise CheckpointCorruptError(f"checkpoint {path} missing field {key!r}")
    if state_checksum(payload["state"]) != payload["checksum"]:
        raise CheckpointCorruptError(f"checkpoint {path} fails its content checksum")
    raw = payload["spec"]
    payload["spec"] = NetworkSpec(
        variant=raw["variant"], depth=raw["depth"],
        base_channels=raw["base_channels"],
        tap_levels=tuple(raw["tap_levels"])).resolve()
    return payload


def build_from_checkpoint(payload: dict):
    net = build_network(payload["spec"])
    net.load_state_dict(payload["state"])
    return net


def _augment_seed(cfg: TrainConfig, epoch: int, index: int) -> int:
    seq = np.random.SeedSequence((cfg.seed, _AUG_STREAM, epoch, index))
    return int(seq.generate_state(1)[0])


def _make_batch(samples, idxs, cfg: TrainConfig, epoch: int, dtype, device):
    xs, ys = [], []
    for i in idxs:
        s = samples[int(i)]
        if cfg.augment:
            s = synthdata.augment(s, _augment_seed(cfg, epoch, int(i)))
        xs.append(torch.as_tensor(s.image, dtype=dtype))
        ys.append(torch.as_tensor(np.asarray(s.mask, dtype=np.float64), dtype=dtype))
    x = torch.stack(xs).unsqueeze(1).to(device)
    y = torch.stack(ys).unsqueeze(1).to(device)
    return x, y


def _projector_rec(proj: Projector, pooled: torch.Tensor, reduction: str) -> torch.Tensor:
    # Reconstruction gradients are confined to the projector: the pooled
    # feature enters detached, so nothing flows back into a backbone.
    rec_in = pooled.detach()
    return reconstruction_loss(rec_in, proj.decode(proj.encode(rec_in)), reduction)


def _similarity_profile(bundle, projectors, cfg: TrainConfig, side: str,
                        grad: bool):
    """Per-tap latent similarity (and the pooled vectors for reconstruction)."""
    cosines, pooled_vecs = [], []
    for k, lvl in enumerate(bundle.levels):
        pool_e = pool_features(bundle.encoder[k])
        pool_d = pool_features(bundle.decoder[k])
        ctx = torch.enable_grad() if grad else torch.no_grad()
        with ctx:
            lat_e = projectors[k].encode(pool_e)
            lat_d = projectors[k].encode(pool_d)
            try:
                cos = latent_similarity(lat_e, lat_d, cfg.similarity)
            except DegenerateLatentError as exc:
                raise DegenerateLatentError(f"{side} tap level {lvl}: {exc}") from exc
        cosines.append(cos)
        pooled_vecs.append((projectors[k], pool_e))
        pooled_vecs.append((projectors[k], pool_d))
    return torch.stack(cosines), pooled_vecs


def _loss_components(cfg: TrainConfig, net, teacher, t_projs, s_projs, x, y):
    """All logged loss terms for one batch; absent terms are exact zeros."""
    zero = torch.zeros((), dtype=x.dtype, device=x.device)
    comp = {"ce": zero, "fsd": zero, "asd": zero, "rec": zero, "kd": zero}

    if cfg.mode in ("teacher", "scratch"):
        pred, _ = net(x)
        comp["ce"] = ce_loss(pred, y)
        return comp

    with torch.no_grad():
        t_pred, t_taps = teacher(x)

    s_pred, s_taps = net(x)
    comp["ce"] = ce_loss(s_pred, y)

    if cfg.mode == "softkd":
        s_logit = torch.logit(s_pred, eps=CLAMP_EPS)
        t_logit = torch.logit(t_pred, eps=CLAMP_EPS)
        comp["kd"] = softkd_loss(s_logit, t_logit, cfg.temperature)
        return comp

    # distill / fsd_only
    cos_t, t_pooled = _similarity_profile(t_taps, t_projs, cfg, "teacher", grad=False)
    cos_s, s_pooled = _similarity_profile(s_taps, s_projs, cfg, "student", grad=True)
    comp["fsd"] = fsd_loss(cos_t, cos_s, cfg.loss_reduction)
    euc_t = euclidean_similarity(t_pred, y)
    euc_s = euclidean_similarity(s_pred, y)
    comp["asd"] = asd_loss(euc_t, euc_s, cfg.loss_reduction)
    rec_terms = [_projector_rec(proj, pooled, cfg.loss_reduction)
                 for proj, pooled in t_pooled + s_pooled]
    comp["rec"] = torch.stack(rec_terms).mean()
    return comp


def _combine(cfg: TrainConfig, comp: dict):
    w = cfg.loss_weights()
    return (w.w_ce * comp["ce"] + w.w_fsd * comp["fsd"] + w.w_asd * comp["asd"]
            + w.w_rec * comp["rec"] + cfg.kd_weight * comp["kd"])


def run_training(cfg: TrainConfig, split: synthdata.DatasetSplit, run_dir: Path,
                 teacher_ckpt: Path | None = None) -> dict:
    """Execute one training run; returns a summary dict.

    Writes train.csv (one row per epoch), last.ckpt every epoch, and
    best.ckpt whenever validation mIOU improves.
    """
    cfg.validate()
    if len(split.train) == 0 or len(split.test) == 0:
        raise ConfigError("both train and test splits must be non-empty")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    device = resolve_device(cfg)
    dtype = torch.float64 if cfg.precision == 64 else torch.float32
    torch.manual_seed(cfg.seed)

    needs_teacher = cfg.mode in _DISTILL_MODES
    if needs_teacher and teacher_ckpt is None:
        raise ConfigError(f"mode {cfg.mode!r} requires a teacher checkpoint")

    variant = "teacher_sk_unet" if cfg.mode == "teacher" else cfg.student_variant
    spec = preset(variant, cfg.net_size)
    if cfg.tap_levels is not None:
        spec = replace(spec, tap_levels=tuple(cfg.tap_levels)).resolve()
    net = build_network(spec, init_seed=cfg.seed).to(device=device, dtype=dtype)

    teacher = None
    checksum_before = checksum_after = None
    if needs_teacher:
        payload = load_checkpoint(teacher_ckpt)
        if payload["spec"].tap_levels != spec.tap_levels:
            raise CheckpointIncompatibleError(
                f"teacher checkpoint taps {payload['spec'].tap_levels} != "
                f"run taps {spec.tap_levels}")
        teacher = build_from_checkpoint(payload).to(device=device, dtype=dtype)
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)
        checksum_before = state_checksum(teacher.state_dict())

    t_projs = s_projs = None
    trainable = list(net.parameters())
    if cfg.mode in ("distill", "fsd_only"):
        proj_seed = int(np.random.SeedSequence((cfg.seed, _PROJ_STREAM)).generate_state(1)[0])
        t_projs = nn.ModuleList([Projector(c) for c in teacher.tap_channels()])
        s_projs = nn.ModuleList([Projector(c) for c in net.tap_channels()])
        init_parameters(t_projs, seed=proj_seed)
        init_parameters(s_projs, seed=proj_seed + 1)
        t_projs.to(device=device, dtype=dtype)
        s_projs.to(device=device, dtype=dtype)
        trainable += list(t_projs.parameters()) + list(s_projs.parameters())

    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(trainable, lr=cfg.lr)
    else:
        opt = torch.optim.SGD(trainable, lr=cfg.lr)
    scheduler = None
    if cfg.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)

    log_path = run_dir / "train.csv"
    best_path = run_dir / "best.ckpt"
    last_path = run_dir / "last.ckpt"
    chash = config_hash(cfg)
    best_miou = -math.inf
    step = 0
    with log_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for epoch in range(cfg.epochs):
            epoch_num = epoch + 1  # 1-based in logs, checkpoints, messages
            t0 = time.perf_counter()
            order = np.random.default_rng(
                [cfg.seed, _ORDER_STREAM, epoch]).permutation(len(split.train))
            sums = dict.fromkeys(("ce", "fsd", "asd", "rec", "kd"), 0.0)
            n_batches = 0
            net.train()
            for start in range(0, len(order), cfg.batch_size):
                idxs = order[start:start + cfg.batch_size]
                x, y = _make_batch(split.train, idxs, cfg, epoch, dtype, device)
                comp = _loss_components(cfg, net, teacher, t_projs, s_projs, x, y)
                objective = _combine(cfg, comp)
                value = float(objective.item())
                if not math.isfinite(value):
                    raise NumericError(
                        f"training diverged at epoch {epoch_num} step {step}: "
                        f"objective {value} (last-good checkpoint retained)")
                opt.zero_grad()
                objective.backward()
                opt.step()
                step += 1
                n_batches += 1
                for key in sums:
                    sums[key] += float(comp[key].item())
            if scheduler is not None:
                scheduler.step()
            means = {k: sums[k] / n_batches for k in sums}
            w = cfg.loss_weights()
            # logged total is recombined from the logged means: the
            # decomposition identity holds exactly by construction
            total_logged = (w.w_ce * means["ce"] + w.w_fsd * means["fsd"]
                            + w.w_asd * means["asd"] + w.w_rec * means["rec"]
                            + cfg.kd_weight * means["kd"])
            val = evaluate_model(net, split.test, threshold=cfg.threshold,
                                 device=device, batch_size=cfg.batch_size,
                                 count_complexity=False)
            wall = time.perf_counter() - t0
            writer.writerow([epoch_num, repr(means["ce"]), repr(means["fsd"]),
                             repr(means["asd"]), repr(means["rec"]),
                             repr(means["kd"]), repr(total_logged),
                             repr(val.acc), repr(val.se), repr(val.auc),
                             repr(val.miou), repr(val.f1), repr(wall)])
            fh.flush()
            meta = {"mode": cfg.mode, "config_hash": chash,
                    "val_miou": val.miou if math.isfinite(val.miou) else -1.0}
            save_checkpoint(last_path, net, epoch=epoch_num, step=step, meta=meta)
            if cfg.keep_epoch_checkpoints:
                save_checkpoint(run_dir / f"epoch_{epoch_num:04d}.ckpt", net,
                                epoch=epoch_num, step=step, meta=meta)
            score = val.miou if math.isfinite(val.miou) else -math.inf
            if score > best_miou or not best_path.exists():
                best_miou = score
                save_checkpoint(best_path, net, epoch=epoch_num, step=step, meta=meta)

    if teacher is not None:
        checksum_after = state_checksum(teacher.state_dict())
        if checksum_after != checksum_before:
            raise NumericError("teacher parameters changed during distillation")

    return {
        "run_dir": str(run_dir),
        "mode": cfg.mode,
        "variant": spec.variant,
        "config_hash": chash,
        "best_checkpoint": str(best_path),
        "last_checkpoint": str(last_path),
        "best_val_miou": best_miou,
        "epochs_run": cfg.epochs,
        "log_csv": str(log_path),
        "teacher_checksum_before": checksum_before,
        "teacher_checksum_after": checksum_after,
    }


def train_teacher(cfg: TrainConfig, split, run_dir: Path) -> dict:
    return run_training(replace(cfg, mode="teacher"), split, run_dir)


def train_scratch(cfg: TrainConfig, split, run_dir: Path) -> dict:
    return run_training(replace(cfg, mode="scratch"), split, run_dir)


def distill(cfg: TrainConfig, teacher_ckpt: Path, split, run_dir: Path) -> dict:
    mode = cfg.mode if cfg.mode in _DISTILL_MODES else "distill"
    return run_training(replace(cfg, mode=mode), split, run_dir,
                        teacher_ckpt=teacher_ckpt)
