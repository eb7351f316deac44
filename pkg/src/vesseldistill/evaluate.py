"""Metrics, complexity accounting, overlays and result tables.

Dataset metrics are micro-averaged: confusion counts are pooled over all
pixels of all samples before any ratio is formed.  Ratios with a zero
denominator return NaN (the undefined marker) instead of a silent 0 and
are excluded from aggregation.

FLOPs convention (pinned here, asserted by tests): one multiply-accumulate
counts as 2 operations; bias adds count 1 per output element; activations,
max-pooling, nearest upsampling, concatenation and padding are free;
average/attention pooling counts its adds; norm layers count 2 ops per
element (scale and shift); depthwise convs divide input channels by
`groups`.  Residual adds and attention arithmetic inside composite blocks
are reported by the blocks themselves via `extra_flops`.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.stats import rankdata
from torch import nn

from .errors import ShapeError, UnsupportedLayerError

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("acc", "se", "auc", "miou", "f1", "flops", "params")


@dataclass
class ConfusionCounts:
    """Pixel confusion counts at a fixed threshold."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _as_numpy(arr) -> np.ndarray:
    if torch.is_tensor(arr):
        return arr.detach().cpu().numpy()
    return np.asarray(arr)


def confusion(pred_prob, gt, threshold: float = 0.5) -> ConfusionCounts:
    """Threshold a probability map and count it against the ground truth."""
    p = _as_numpy(pred_prob)
    y = _as_numpy(gt)
    if p.shape != y.shape:
        raise ShapeError(f"{p.shape} vs {y.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    pos = p >= threshold
    truth = y > 0.5
    return ConfusionCounts(
        tp=int(np.sum(pos & truth)),
        fp=int(np.sum(pos & ~truth)),
        tn=int(np.sum(~pos & ~truth)),
        fn=int(np.sum(~pos & truth)),
    )


def _ratio(num: float, den: float, name: str) -> float:
    if den == 0:
        log.warning("%s undefined: zero denominator", name)
        return math.nan
    return num / den


def accuracy(c: ConfusionCounts) -> float:
    return _ratio(c.tp + c.tn, c.total, "accuracy")


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, "sensitivity")


def f1(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f1")


def miou(c: ConfusionCounts) -> float:
    """Mean of foreground and background IoU."""
    fg = _ratio(c.tp, c.tp + c.fp + c.fn, "iou_fg")
    bg = _ratio(c.tn, c.tn + c.fp + c.fn, "iou_bg")
    return (fg + bg) / 2.0


def auc(pred_prob, gt) -> float:
    """Area under the ROC curve via midranks (ties averaged).

    Equivalent to the probability that a random foreground pixel scores
    above a random background pixel, with ties counting one half.
    """
    p = _as_numpy(pred_prob).ravel().astype(np.float64)
    y = _as_numpy(gt).ravel() > 0.5
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        log.warning("auc undefined: single-class ground truth")
        return math.nan
    ranks = rankdata(p)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def count_params(net: nn.Module) -> int:
    """Number of trainable scalar parameters."""
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def _conv_flops(m: nn.Conv2d, out_shape) -> int:
    cout, h, w = out_shape[-3:]
    kh, kw = m.kernel_size
    cin_per_group = m.in_channels // m.groups
    macs = kh * kw * cin_per_group * cout * h * w
    flops = 2 * macs
    if m.bias is not None:
        flops += cout * h * w
    return flops


def _linear_flops(m: nn.Linear, out_shape) -> int:
    batch = int(np.prod(out_shape[:-1])) if len(out_shape) > 1 else 1
    flops = 2 * m.in_features * m.out_features * batch
    if m.bias is not None:
        flops += m.out_features * batch
    return flops


def count_flops(net: nn.Module, input_shape) -> int:
    """Forward-pass FLOPs of `net` on one `input_shape` = (C, H, W) sample.

    Walks every module of an actual forward trace; a leaf module without
    a counting rule raises UnsupportedLayerError rather than being
    silently skipped.
    """
    traces: list[tuple[nn.Module, tuple, tuple]] = []

    def hook(module, inputs, output):
        out = output[0] if isinstance(output, tuple) else output
        in_ = inputs[0] if inputs else None
        traces.append((module,
                       tuple(in_.shape) if torch.is_tensor(in_) else (),
                       tuple(out.shape) if torch.is_tensor(out) else ()))

    handles = [m.register_forward_hook(hook) for m in net.modules()]
    was_training = net.training
    try:
        net.eval()
        with torch.no_grad():
            net(torch.zeros(1, *input_shape))
    finally:
        for h in handles:
            h.remove()
        net.train(was_training)

    zero_cost = (nn.ReLU, nn.ReLU6, nn.Sigmoid, nn.Softmax, nn.Identity,
                 nn.MaxPool2d, nn.Upsample, nn.Dropout, nn.Flatten)
    total = 0
    for module, in_shape, out_shape in traces:
        if isinstance(module, nn.Conv2d):
            total += _conv_flops(module, out_shape)
        elif isinstance(module, nn.Linear):
            total += _linear_flops(module, out_shape)
        elif isinstance(module, (nn.BatchNorm2d, nn.BatchNorm1d, nn.GroupNorm)):
            total += 2 * int(np.prod(out_shape))
        elif isinstance(module, (nn.AdaptiveAvgPool2d, nn.AvgPool2d)):
            total += int(np.prod(in_shape))
        elif isinstance(module, zero_cost):
            pass
        elif len(list(module.children())) == 0 and module is not net:
            raise UnsupportedLayerError(
                f"no FLOPs rule for leaf module {type(module).__name__}")
        if hasattr(module, "extra_flops"):
            total += int(module.extra_flops(out_shape))
    return total


@dataclass
class MetricsReport:
    """Micro-averaged dataset metrics plus complexity and run metadata."""

    acc: float
    se: float
    auc: float
    miou: float
    f1: float
    flops: int
    params: int
    meta: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {k: getattr(self, k) for k in METRIC_COLUMNS}
        out.update(self.meta)
        return out


def evaluate_model(net: nn.Module, samples, threshold: float = 0.5,
                   device: str = "cpu", batch_size: int = 16,
                   count_complexity: bool = True,
                   meta: dict | None = None) -> MetricsReport:
    """Run the net over `samples` and pool metrics over every pixel."""
    if len(samples) == 0:
        raise ValueError("no samples to evaluate")
    dev = torch.device(device)
    dtype = next(net.parameters()).dtype
    was_training = net.training
    net.eval()
    counts = ConfusionCounts()
    probs, truths = [], []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            x = torch.stack([torch.as_tensor(s.image, dtype=dtype) for s in chunk]
                            ).unsqueeze(1).to(dev)
            out = net(x)
            pred = out[0] if isinstance(out, tuple) else out
            pred = pred.squeeze(1).cpu().numpy()
            for s, p in zip(chunk, pred):
                counts = counts + confusion(p, s.mask, threshold)
                probs.append(p.ravel())
                truths.append(s.mask.ravel())
    net.train(was_training)
    pooled_p = np.concatenate(probs)
    pooled_y = np.concatenate(truths)
    if count_complexity:
        h, w = samples[0].image.shape
        flops = count_flops(net, (1, h, w))
        params = count_params(net)
    else:
        flops, params = 0, 0
    return MetricsReport(
        acc=accuracy(counts), se=sensitivity(counts), auc=auc(pooled_p, pooled_y),
        miou=miou(counts), f1=f1(counts), flops=flops, params=params,
        meta=dict(meta or {}))


def write_metrics_csv(path: Path, reports: list[MetricsReport]) -> Path:
    """One row per evaluated checkpoint; floats written losslessly (repr)."""
    path = Path(path)
    rows = [r.row() for r in reports]
    meta_keys = sorted({k for row in rows for k in row} - set(METRIC_COLUMNS))
    header = list(METRIC_COLUMNS) + meta_keys
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(row[k]) if isinstance(row.get(k), float)
                             else row.get(k, "") for k in header])
    return path


def read_metrics_csv(path: Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def render_overlay(sample, pred_prob, path: Path, threshold: float = 0.5) -> Path:
    """Four panels side by side: input, ground truth, prediction, errors.

    The error panel colors false positives red and false negatives blue;
    a perfect prediction leaves it uniformly black.  Panels are written
    without separators so panel k is exactly columns [k*W, (k+1)*W).
    """
    img = _as_numpy(sample.image)
    gt = _as_numpy(sample.mask) > 0.5
    p = _as_numpy(pred_prob)
    if p.shape != img.shape:
        raise ShapeError(f"prediction {p.shape} vs image {img.shape}")
    pred = p >= threshold

    def gray_rgb(a):
        u = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
        return np.stack([u, u, u], axis=-1)

    panel_in = gray_rgb(img)
    panel_gt = gray_rgb(gt.astype(np.float64))
    panel_pred = gray_rgb(pred.astype(np.float64))
    panel_err = np.zeros((*img.shape, 3), dtype=np.uint8)
    panel_err[pred & ~gt] = (255, 0, 0)   # false positive
    panel_err[~pred & gt] = (0, 0, 255)   # false negative
    strip = np.concatenate([panel_in, panel_gt, panel_pred, panel_err], axis=1)
    path = Path(path)
    Image.fromarray(strip, mode="RGB").save(path)
    return path


# Row ordering for result tables: teacher first, then students, with each
# student's runs grouped from plain training to full distillation.
_MODE_ORDER = {"teacher": 0, "scratch": 1, "softkd": 2, "fsd_only": 3, "distill": 4}
_VARIANT_ORDER = {v: i for i, v in enumerate(
    ("teacher_sk_unet", "student_mobile", "student_enet", "student_erfnet"))}


def write_report(path: Path, rows: list[dict]) -> Path:
    """Aggregate evaluated runs into one markdown table."""
    def key(row):
        mode = row.get("mode", "")
        variant = row.get("variant", "")
        return (0 if mode == "teacher" else 1,
                _VARIANT_ORDER.get(variant, 99),
                _MODE_ORDER.get(mode, 99))

    rows = sorted(rows, key=key)
    cols = ["variant", "mode", "acc", "se", "auc", "miou", "f1", "flops", "params"]

    def fmt(row, col):
        val = row.get(col, "")
        try:
            num = float(val)
        except (TypeError, ValueError):
            return str(val)
        if col in ("flops", "params"):
            return f"{int(num):,}"
        return f"{num:.4f}"

    lines = ["| " + " | ".join(cols) + " |",
             "| " + " | ".join("---" for _ in cols) + " |"]
    for row in rows:
        lines.append("| " + " | ".join(fmt(row, c) for c in cols) + " |")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path
