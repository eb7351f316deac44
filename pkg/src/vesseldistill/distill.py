"""Similarity-distillation losses and the per-tap projector.

The transfer signal is built from two kinds of similarity:

* feature-wise: each network's encoder/decoder feature maps at matching
  levels are pooled, projected into a shared 512-wide latent space by a
  small MLP autoencoder, and compared by the cosine of their outer
  products (a scalar per tap per sample).  The student is pushed to
  reproduce the teacher's per-tap similarity profile.
* accuracy-distance: each prediction's Euclidean distance to the ground
  truth is a scalar per sample; the student is pushed to match the
  teacher's distance rather than the prediction itself.

Teacher-side inputs are detached inside every loss here, so no gradient
ever reaches the teacher (or its projectors) through a distillation term.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, DegenerateLatentError, NumericError, ShapeError

CLAMP_EPS = 1e-7
LATENT_DIM = 512


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined objective; all default to 1."""

    w_ce: float = 1.0
    w_fsd: float = 1.0
    w_asd: float = 1.0
    w_rec: float = 1.0

    def validate(self) -> None:
        for name, value in (("w_ce", self.w_ce), ("w_fsd", self.w_fsd),
                            ("w_asd", self.w_asd), ("w_rec", self.w_rec)):
            if not (value >= 0.0):
                raise ConfigError(f"{name} must be >= 0, got {value}")


class Projector(nn.Module):
    """MLP autoencoder mapping a pooled C-vector into the shared latent space.

    Encoder: C -> hidden -> latent; decoder mirrors it back to C.  One
    projector serves the encoder and decoder taps of one network level
    (their channel widths match by construction of the networks).
    """

    def __init__(self, channels: int, latent_dim: int = LATENT_DIM,
                 hidden_dim: int = LATENT_DIM):
        super().__init__()
        if channels < 1:
            raise ConfigError(f"channels must be >= 1, got {channels}")
        self.channels = channels
        self.latent_dim = latent_dim
        self.encoder = nn.Sequential(
            nn.Linear(channels, hidden_dim), nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, latent_dim))
        self.decoder = nn.Sequential(
            nn.Linear(latent_dim, hidden_dim), nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, channels))

    def encode(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.encoder(pooled)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return self.decoder(latent)


def pool_features(feature_map: torch.Tensor) -> torch.Tensor:
    """Spatial mean per channel: (C,H,W) -> (C,) or (B,C,H,W) -> (B,C)."""
    if feature_map.dim() not in (3, 4):
        raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {tuple(feature_map.shape)}")
    return feature_map.mean(dim=(-2, -1))


def project(projector: Projector, feature_map: torch.Tensor):
    """Pool a feature map and run it through the projector.

    Returns (latent, reconstruction, pooled).  The reconstruction target
    is the pooled vector itself.
    """
    pooled = pool_features(feature_map)
    channels = pooled.shape[-1]
    if channels != projector.channels:
        raise ShapeError(
            f"feature map has {channels} channels, projector expects {projector.channels}")
    latent = projector.encode(pooled)
    reconstruction = projector.decode(latent)
    return latent, reconstruction, pooled


def reconstruction_loss(fea_in: torch.Tensor, fea_out: torch.Tensor,
                        reduction: str = "mean") -> torch.Tensor:
    """Mean absolute difference between a pooled vector and its reconstruction.

    reduction="raw" yields the plain L1 norm (sum of absolute differences)
    instead of the mean, for fidelity experiments.
    """
    if fea_in.shape != fea_out.shape:
        raise ShapeError(f"{tuple(fea_in.shape)} vs {tuple(fea_out.shape)}")
    diff = (fea_in - fea_out).abs()
    if reduction == "mean":
        return diff.mean()
    if reduction == "raw":
        return diff.sum()
    raise ConfigError(f"unknown reduction {reduction!r}")


def latent_similarity(latent_a: torch.Tensor, latent_b: torch.Tensor,
                      mode: str = "outer") -> torch.Tensor:
    """Similarity of two latent vectors (or batches of them).

    mode="outer" (default): flatten the outer product of each latent with
    itself and take the cosine between the two flattened matrices.  For
    rank-one matrices this equals the squared cosine of the vectors, so
    the result lies in [0, 1] and is invariant to rescaling either input.

    mode="direct": plain cosine of the two vectors, in [-1, 1].

    Zero-norm latents have no direction to compare; they raise
    DegenerateLatentError rather than returning a silent 0.
    """
    if latent_a.shape != latent_b.shape:
        raise ShapeError(f"{tuple(latent_a.shape)} vs {tuple(latent_b.shape)}")
    if latent_a.dim() not in (1, 2):
        raise ShapeError(f"expected (D,) or (B,D) latents, got {tuple(latent_a.shape)}")
    norm_a = latent_a.norm(dim=-1)
    norm_b = latent_b.norm(dim=-1)
    if (norm_a == 0).any() or (norm_b == 0).any():
        raise DegenerateLatentError("latent with zero norm")
    cos = (latent_a * latent_b).sum(dim=-1) / (norm_a * norm_b)
    if mode == "direct":
        return cos
    if mode != "outer":
        raise ConfigError(f"unknown similarity mode {mode!r}")
    # The flattened outer product of a vector with itself is a rank-one
    # matrix, so the cosine between two such flattenings collapses to the
    # squared vector cosine.  Computing it this way avoids materializing
    # D x D matrices on every tap.
    return cos ** 2


def fsd_loss(cos_tea, cos_stu, reduction: str = "mean") -> torch.Tensor:
    """Feature-similarity distillation: squared gap of per-tap similarities.

    Inputs are the per-tap similarity scalars of teacher and student
    (any matching shape; training passes (taps, batch) tensors).  The
    teacher side is treated as a constant.  reduction="mean" averages
    the squared differences; "raw" yields the Euclidean norm of the
    difference vector instead.
    """
    t = torch.as_tensor(cos_tea).detach()
    s = cos_stu if torch.is_tensor(cos_stu) else torch.as_tensor(cos_stu)
    if t.shape != s.shape:
        raise ShapeError(f"{tuple(t.shape)} vs {tuple(s.shape)}")
    if t.numel() == 0:
        raise ShapeError("no tap similarities given")
    sq = (t - s) ** 2
    if reduction == "mean":
        return sq.mean()
    if reduction == "raw":
        return sq.sum().sqrt()
    raise ConfigError(f"unknown reduction {reduction!r}")


def euclidean_similarity(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Euclidean distance between a prediction and its ground truth.

    One scalar per sample: a 2-D input is a single map, higher-rank
    inputs are batches flattened per sample.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"{tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.dim() <= 2:
        return ((pred - gt) ** 2).sum().sqrt()
    flat = (pred - gt).flatten(start_dim=1)
    return (flat ** 2).sum(dim=1).sqrt()


def asd_loss(euc_tea, euc_stu, reduction: str = "mean") -> torch.Tensor:
    """Accuracy-distance distillation: squared gap of per-sample distances.

    The teacher-side distances are constants; only the student's distance
    to ground truth carries gradient.
    """
    t = torch.as_tensor(euc_tea).detach()
    s = euc_stu if torch.is_tensor(euc_stu) else torch.as_tensor(euc_stu)
    if t.shape != s.shape:
        raise ShapeError(f"{tuple(t.shape)} vs {tuple(s.shape)}")
    if t.numel() == 0:
        raise ShapeError("empty batch")
    sq = (t - s) ** 2
    if reduction == "mean":
        return sq.mean()
    if reduction == "raw":
        return sq.sum().sqrt()
    raise ConfigError(f"unknown reduction {reduction!r}")


def ce_loss(pred: torch.Tensor, gt: torch.Tensor,
            eps: float = CLAMP_EPS) -> torch.Tensor:
    """Binary cross-entropy averaged over every pixel.

    Predictions are clamped to [eps, 1-eps] so saturated outputs cannot
    produce infinities.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"{tuple(pred.shape)} vs {tuple(gt.shape)}")
    p = pred.clamp(eps, 1.0 - eps)
    y = gt.to(p.dtype)
    return -(y * p.log() + (1.0 - y) * (1.0 - p).log()).mean()


def total_loss(ce: torch.Tensor, fsd: torch.Tensor, asd: torch.Tensor,
               weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the three objective terms."""
    weights.validate()
    for name, term in (("ce", ce), ("fsd", fsd), ("asd", asd)):
        value = term.item() if torch.is_tensor(term) else float(term)
        if not (value == value and abs(value) != float("inf")):
            raise NumericError(f"non-finite {name} component: {value}")
    return weights.w_ce * ce + weights.w_fsd * fsd + weights.w_asd * asd


def softkd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
                temperature: float) -> torch.Tensor:
    """Classic soft-label distillation baseline for binary outputs.

    Both logit maps are softened by the temperature, turned into per-pixel
    Bernoulli distributions, and compared by KL(teacher || student),
    averaged over pixels and scaled by temperature^2 (which keeps the
    gradient magnitude roughly temperature-independent).  Zero exactly
    when the logits coincide.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(
            f"{tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    p_t = torch.sigmoid(teacher_logits.detach() / temperature).clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
    p_s = torch.sigmoid(student_logits / temperature).clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
    kl = p_t * (p_t.log() - p_s.log()) + (1.0 - p_t) * ((1.0 - p_t).log() - (1.0 - p_s).log())
    return temperature ** 2 * kl.mean()
