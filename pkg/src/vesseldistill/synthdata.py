"""Seeded synthetic vessel corpus and the patch-based ingestion protocol.

Real angiograms are private, so the framework trains and evaluates on
generated stand-ins: dark branching tubular structures on a bright,
cluttered background with fuzzy boundaries.  Each sample is a pure
function of (config, index) — corpora are bit-identical across runs and
can be generated in parallel without changing the result.

The ingestion protocol mirrors the usual practice for large grayscale
frames: full-size parent images are cut into an overlapping grid of
square patches, and the train/test split is decided at parent level so
patches of one parent never straddle the split.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ShapeError

# Independent seed streams, so the split shuffle and transform choices
# never collide with the per-image draws.
_SPLIT_STREAM = 0x5BA11
_AUG_STREAM = 0xA06

TRANSFORMS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")


@dataclass(frozen=True)
class SynthConfig:
    """Generator parameters. The whole corpus is a pure function of this."""

    seed: int = 0
    canvas_size: int = 992
    n_images: int = 240
    branch_count_range: tuple[int, int] = (2, 5)
    vessel_width_range: tuple[float, float] = (3.0, 11.0)
    contrast_range: tuple[float, float] = (0.35, 0.8)
    clutter_level: float = 1.0

    def validate(self) -> None:
        if self.canvas_size < 8:
            raise ConfigError(f"canvas_size must be >= 8, got {self.canvas_size}")
        if self.n_images < 1:
            raise ConfigError(f"n_images must be >= 1, got {self.n_images}")
        lo, hi = self.branch_count_range
        if not (1 <= lo <= hi):
            raise ConfigError(f"branch_count_range must be 1 <= lo <= hi, got {self.branch_count_range}")
        wlo, whi = self.vessel_width_range
        if not (1.0 <= wlo <= whi):
            raise ConfigError(f"vessel_width_range must be 1 <= lo <= hi, got {self.vessel_width_range}")
        clo, chi = self.contrast_range
        if not (0.0 < clo <= chi <= 1.0):
            raise ConfigError(f"contrast_range must satisfy 0 < lo <= hi <= 1, got {self.contrast_range}")
        if self.clutter_level < 0:
            raise ConfigError(f"clutter_level must be >= 0, got {self.clutter_level}")


@dataclass(eq=False)
class AngiogramSample:
    """One grayscale image with its binary vessel mask."""

    image: np.ndarray  # float64 in [0, 1], shape (H, W), 8-bit quantized
    mask: np.ndarray   # uint8 in {0, 1}, same shape
    id: str
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.image.shape != self.mask.shape:
            raise ShapeError(f"image {self.image.shape} vs mask {self.mask.shape}")
        if self.image.size == 0:
            raise ShapeError("empty sample")
        if float(self.image.min()) < 0.0 or float(self.image.max()) > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")


@dataclass
class DatasetSplit:
    """Parent-level train/test partition of patch samples."""

    train: list[AngiogramSample]
    test: list[AngiogramSample]
    train_parents: list[str] = field(default_factory=list)
    test_parents: list[str] = field(default_factory=list)


def _stamp_segment(canvas: np.ndarray, p, q, w0: float, w1: float) -> None:
    # Anti-aliased capsule between p and q with linearly varying width.
    # Coverage = clip(radius + 0.5 - distance, 0, 1) gives a one-pixel
    # soft edge; union with what is already on the canvas via max.
    size = canvas.shape[0]
    rmax = max(w0, w1) / 2.0 + 1.0
    x0 = max(int(np.floor(min(p[0], q[0]) - rmax)), 0)
    x1 = min(int(np.ceil(max(p[0], q[0]) + rmax)) + 1, size)
    y0 = max(int(np.floor(min(p[1], q[1]) - rmax)), 0)
    y1 = min(int(np.ceil(max(p[1], q[1]) + rmax)) + 1, size)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx, dy = q[0] - p[0], q[1] - p[1]
    norm2 = dx * dx + dy * dy
    if norm2 == 0.0:
        t = np.zeros_like(xs, dtype=np.float64)
    else:
        t = ((xs - p[0]) * dx + (ys - p[1]) * dy) / norm2
        t = np.clip(t, 0.0, 1.0)
    cx = p[0] + t * dx
    cy = p[1] + t * dy
    dist = np.hypot(xs - cx, ys - cy)
    radius = (w0 + (w1 - w0) * t) / 2.0
    cov = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    np.maximum(canvas[y0:y1, x0:x1], cov, out=canvas[y0:y1, x0:x1])


def _walk_branch(canvas, rng, pos, angle, length, width, generations) -> None:
    size = canvas.shape[0]
    step = max(2.0, size / 120.0)
    n_steps = max(2, int(length / step))
    w_end = width * 0.75  # taper along the branch
    p = np.array(pos, dtype=np.float64)
    for i in range(n_steps):
        angle += rng.normal(0.0, 0.12)
        q = p + step * np.array([np.cos(angle), np.sin(angle)])
        wa = width + (w_end - width) * (i / n_steps)
        wb = width + (w_end - width) * ((i + 1) / n_steps)
        _stamp_segment(canvas, p, q, wa, wb)
        p = q
        if not (-0.1 * size < p[0] < 1.1 * size and -0.1 * size < p[1] < 1.1 * size):
            return  # wandered far off canvas, nothing more to draw
    if generations > 1:
        for side in (-1.0, 1.0):
            child_angle = angle + side * rng.uniform(0.25, 0.8)
            child_width = w_end * rng.uniform(0.6, 0.85)
            child_length = length * rng.uniform(0.55, 0.8)
            if child_width >= 0.8:  # invisible twigs are not worth drawing
                _walk_branch(canvas, rng, p, child_angle, child_length,
                             child_width, generations - 1)


def _draw_vessels(rng, cfg: SynthConfig) -> np.ndarray:
    size = cfg.canvas_size
    canvas = np.zeros((size, size), dtype=np.float64)
    n_trees = int(rng.integers(1, 4))
    for _ in range(n_trees):
        generations = int(rng.integers(cfg.branch_count_range[0],
                                       cfg.branch_count_range[1] + 1))
        side = int(rng.integers(0, 4))
        along = rng.uniform(0.1, 0.9) * size
        margin = 0.02 * size
        # start on a border, heading inward with some jitter
        if side == 0:
            pos, base = (margin, along), 0.0
        elif side == 1:
            pos, base = (size - margin, along), np.pi
        elif side == 2:
            pos, base = (along, margin), np.pi / 2.0
        else:
            pos, base = (along, size - margin), -np.pi / 2.0
        angle = base + rng.uniform(-0.5, 0.5)
        width = rng.uniform(*cfg.vessel_width_range)
        length = size * rng.uniform(0.3, 0.5)
        _walk_branch(canvas, rng, pos, angle, length, width, generations)
    return canvas


def _lowfreq_field(rng, size: int, grid: int = 9) -> np.ndarray:
    # Bilinear upsampling of a coarse noise grid: smooth background shading.
    coarse = rng.normal(0.0, 1.0, (grid, grid))
    t = np.linspace(0.0, grid - 1.0, size)
    i0 = np.floor(t).astype(int)
    i1 = np.minimum(i0 + 1, grid - 1)
    f = t - i0
    rows = coarse[i0, :] * (1.0 - f)[:, None] + coarse[i1, :] * f[:, None]
    return rows[:, i0] * (1.0 - f)[None, :] + rows[:, i1] * f[None, :]


def generate_image(cfg: SynthConfig, index: int) -> AngiogramSample:
    """Generate parent image `index` of the corpus described by `cfg`.

    Deterministic per (cfg, index); images are quantized to the 8-bit
    grid so the in-memory sample equals its on-disk PNG round trip.
    """
    cfg.validate()
    if not 0 <= index < cfg.n_images:
        raise ValueError(f"index {index} outside [0, {cfg.n_images})")
    rng = np.random.default_rng([cfg.seed, index])

    stroke = _draw_vessels(rng, cfg)
    mask = (stroke >= 0.5).astype(np.uint8)

    sigma = float(rng.uniform(1.0, 2.0))
    vessel = gaussian_filter(mask.astype(np.float64), sigma)
    contrast = float(rng.uniform(*cfg.contrast_range))
    image = 1.0 - contrast * vessel  # vessels darker than background
    if cfg.clutter_level > 0:
        size = cfg.canvas_size
        field_ = _lowfreq_field(rng, size)
        noise = rng.normal(0.0, 1.0, (size, size))
        image = image + cfg.clutter_level * (0.06 * field_ + 0.02 * noise)
    image = np.clip(image, 0.0, 1.0)
    image = np.round(image * 255.0) / 255.0

    return AngiogramSample(
        image=image,
        mask=mask,
        id=f"img{index:04d}",
        provenance={
            "seed": cfg.seed,
            "index": index,
            "sigma": sigma,
            "contrast": contrast,
            "config": asdict(cfg),
        },
    )


def _corners(extent: int, patch: int, n: int) -> list[int]:
    # Evenly spaced corners, last patch flush with the border.
    if n == 1:
        return [0]
    stride = (extent - patch) // (n - 1)
    return [i * stride for i in range(n - 1)] + [extent - patch]


def crop_patches(sample: AngiogramSample, patch_size: int,
                 grid: tuple[int, int] = (4, 4)) -> list[AngiogramSample]:
    """Cut a sample into a rows x cols grid of square patches.

    Corners are evenly spaced with the last patch flush with the border,
    so the grid spans the image exactly (patches overlap when
    grid * patch_size exceeds the image).
    """
    h, w = sample.image.shape
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise ValueError(f"grid must be positive, got {grid}")
    if patch_size < 1 or patch_size > h or patch_size > w:
        raise ValueError(f"patch_size {patch_size} does not fit image {sample.image.shape}")
    if rows * patch_size < h or cols * patch_size < w:
        raise ValueError(
            f"grid {grid} of {patch_size}px patches cannot span image {sample.image.shape}")
    patches = []
    for r, y in enumerate(_corners(h, patch_size, rows)):
        for c, x in enumerate(_corners(w, patch_size, cols)):
            patches.append(AngiogramSample(
                image=sample.image[y:y + patch_size, x:x + patch_size].copy(),
                mask=sample.mask[y:y + patch_size, x:x + patch_size].copy(),
                id=f"{sample.id}_r{r}c{c}",
                provenance={"parent": sample.id, "row": r, "col": c,
                            "y": y, "x": x},
            ))
    return patches


def apply_transform(sample: AngiogramSample, name: str) -> AngiogramSample:
    """Apply one of the eight-group transforms used for augmentation."""
    if name not in TRANSFORMS:
        raise ValueError(f"unknown transform {name!r}, expected one of {TRANSFORMS}")
    ops = {
        "identity": lambda a: a,
        "hflip": lambda a: a[:, ::-1],
        "vflip": lambda a: a[::-1, :],
        "rot90": lambda a: np.rot90(a, 1),
        "rot180": lambda a: np.rot90(a, 2),
        "rot270": lambda a: np.rot90(a, 3),
    }
    op = ops[name]
    return AngiogramSample(
        image=np.ascontiguousarray(op(sample.image)),
        mask=np.ascontiguousarray(op(sample.mask)),
        id=sample.id,
        provenance={**sample.provenance, "transform": name},
    )


def augment(sample: AngiogramSample, seed: int) -> AngiogramSample:
    """Seeded choice among flips/rotations, applied to image and mask alike."""
    rng = np.random.default_rng([_AUG_STREAM, seed])
    name = TRANSFORMS[int(rng.integers(0, len(TRANSFORMS)))]
    return apply_transform(sample, name)


def split_parent_ids(cfg: SynthConfig, train_fraction: float) -> tuple[list[int], list[int]]:
    """Seeded parent-level partition; patches of one parent never straddle it."""
    cfg.validate()
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if cfg.n_images < 2:
        raise ConfigError("need at least 2 parent images to build a split")
    n_train = int(round(train_fraction * cfg.n_images))
    if n_train < 1 or n_train > cfg.n_images - 1:
        raise ConfigError(
            f"train_fraction {train_fraction} leaves an empty side with "
            f"{cfg.n_images} parent images")
    rng = np.random.default_rng([cfg.seed, _SPLIT_STREAM])
    order = rng.permutation(cfg.n_images)
    return sorted(int(i) for i in order[:n_train]), sorted(int(i) for i in order[n_train:])


def build_split(cfg: SynthConfig, train_fraction: float,
                patch_size: int = 256,
                grid: tuple[int, int] = (4, 4)) -> DatasetSplit:
    """Generate the full corpus and partition its patches at parent level."""
    train_ids, test_ids = split_parent_ids(cfg, train_fraction)
    split = DatasetSplit(train=[], test=[], train_parents=[], test_parents=[])
    for index in range(cfg.n_images):
        parent = generate_image(cfg, index)
        patches = crop_patches(parent, patch_size, grid)
        if index in train_ids:
            split.train.extend(patches)
            split.train_parents.append(parent.id)
        else:
            split.test.extend(patches)
            split.test_parents.append(parent.id)
    return split


def _write_png(path: Path, arr_u8: np.ndarray) -> None:
    Image.fromarray(arr_u8, mode="L").save(path)


def save_corpus(root: Path, cfg: SynthConfig, train_fraction: float,
                patch_size: int = 256, grid: tuple[int, int] = (4, 4),
                progress=None) -> dict:
    """Stream the corpus to `root` as 8-bit PNGs plus a manifest.

    Parents are generated, cropped, written and dropped one at a time, so
    peak memory stays at one parent regardless of corpus size.  Returns
    the manifest dict (also written to manifest.json).
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    train_ids, _ = split_parent_ids(cfg, train_fraction)
    train_ids = set(train_ids)
    manifest = {
        "config": asdict(cfg),
        "train_fraction": train_fraction,
        "patch_size": patch_size,
        "grid": list(grid),
        "parents": [],
        "patches": [],
    }
    for index in range(cfg.n_images):
        parent = generate_image(cfg, index)
        tag = "train" if index in train_ids else "test"
        manifest["parents"].append({
            "id": parent.id,
            "split": tag,
            "sigma": parent.provenance["sigma"],
            "contrast": parent.provenance["contrast"],
        })
        for patch in crop_patches(parent, patch_size, grid):
            _write_png(root / "images" / f"{patch.id}.png",
                       np.round(patch.image * 255.0).astype(np.uint8))
            _write_png(root / "masks" / f"{patch.id}.png",
                       (patch.mask * 255).astype(np.uint8))
            manifest["patches"].append({
                "id": patch.id,
                "parent": patch.provenance["parent"],
                "split": tag,
                "row": patch.provenance["row"],
                "col": patch.provenance["col"],
            })
        if progress is not None:
            progress(index + 1, cfg.n_images)
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1))
    tmp.replace(root / "manifest.json")
    return manifest


def load_corpus(root: Path) -> tuple[DatasetSplit, dict]:
    """Load a corpus written by save_corpus; intensities back to [0, 1]."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    split = DatasetSplit(train=[], test=[], train_parents=[], test_parents=[])
    for entry in manifest["parents"]:
        (split.train_parents if entry["split"] == "train"
         else split.test_parents).append(entry["id"])
    for entry in manifest["patches"]:
        img = np.asarray(Image.open(root / "images" / f"{entry['id']}.png"),
                         dtype=np.float64) / 255.0
        msk = (np.asarray(Image.open(root / "masks" / f"{entry['id']}.png")) > 127
               ).astype(np.uint8)
        sample = AngiogramSample(image=img, mask=msk, id=entry["id"],
                                 provenance=dict(entry))
        (split.train if entry["split"] == "train" else split.test).append(sample)
    return split, manifest
