"""Segmentation networks: one heavy teacher and three lightweight students.

All four variants share the same frame: an encoder that halves the
spatial size at every level, a plain conv-upsample decoder with skip
connections, and a sigmoid head producing one foreground-probability
channel.  Only the encoder blocks differ:

* teacher_sk_unet   — selective-kernel blocks (parallel 3x3/5x5 convs
                      fused by softmax channel attention)
* student_mobile    — inverted bottlenecks (expand, depthwise, project)
* student_enet      — parallel conv/pool initial block plus narrow
                      1x1-3x3-1x1 bottlenecks with residuals
* student_erfnet    — the same initial block plus factorized 3x1/1x3
                      residual convolutions

Decoder channel widths mirror the encoder widths level by level, so the
feature taps of a level form a (same-channel) encoder/decoder pair.
Taps are the tensors flowing between stages, taken after each stage's
final nonlinearity where its design has one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError

VARIANTS = ("teacher_sk_unet", "student_mobile", "student_enet", "student_erfnet")

# Full-scale widths, frozen after numeric tuning against the complexity
# targets (see tests/test_evaluate.py).  "blocks" is blocks per encoder
# stage, truncated to the configured depth.
_VARIANT_DEFAULTS = {
    "teacher_sk_unet": {"base": 104, "blocks": (2, 2, 1, 1)},
    "student_mobile": {"base": 48, "blocks": (2, 2, 2, 2)},
    "student_erfnet": {"base": 24, "blocks": (2, 2, 2, 2)},
    "student_enet": {"base": 16, "blocks": (1, 2, 2, 4)},
}


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description; everything needed to rebuild a network."""

    variant: str
    depth: int = 4
    base_channels: int | None = None   # None -> variant default
    tap_levels: tuple[int, ...] | None = None  # None -> all levels

    def resolve(self) -> "NetworkSpec":
        """Fill in defaults and validate."""
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if not 2 <= self.depth <= 6:
            raise ConfigError(f"depth must be in [2, 6], got {self.depth}")
        base = self.base_channels
        if base is None:
            base = _VARIANT_DEFAULTS[self.variant]["base"]
        if base < 2:
            raise ConfigError(f"base_channels must be >= 2, got {base}")
        levels = self.tap_levels
        if levels is None:
            levels = tuple(range(1, self.depth + 1))
        levels = tuple(int(l) for l in levels)
        if len(levels) == 0 or len(set(levels)) != len(levels):
            raise ConfigError(f"tap_levels must be non-empty and unique, got {levels}")
        if any(not 1 <= l <= self.depth for l in levels):
            raise ConfigError(f"tap_levels {levels} outside [1, {self.depth}]")
        return replace(self, base_channels=base, tap_levels=levels)


@dataclass
class TapBundle:
    """Matched encoder/decoder feature maps at the requested levels."""

    levels: tuple[int, ...]
    encoder: list[torch.Tensor]
    decoder: list[torch.Tensor]

    def validate(self) -> None:
        if not (len(self.levels) == len(self.encoder) == len(self.decoder)):
            raise ShapeError("tap count mismatch")
        for lvl, e, d in zip(self.levels, self.encoder, self.decoder):
            if e.shape[-2:] != d.shape[-2:]:
                raise ShapeError(
                    f"level {lvl}: encoder {tuple(e.shape)} vs decoder {tuple(d.shape)}")


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1):
        super().__init__(
            nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True))


class SKBlock(nn.Module):
    """Selective-kernel conv: 3x3 and 5x5 branches fused by channel attention."""

    def __init__(self, cin: int, cout: int, reduction: int = 8):
        super().__init__()
        self.branches = nn.ModuleList([
            nn.Sequential(
                nn.Conv2d(cin, cout, k, padding=k // 2, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True))
            for k in (3, 5)])
        hidden = max(cout // reduction, 16)
        self.squeeze = nn.Linear(cout, hidden)
        self.excite = nn.Linear(hidden, 2 * cout)

    def forward(self, x):
        feats = torch.stack([b(x) for b in self.branches], dim=1)  # (B,2,C,H,W)
        fused = feats.sum(dim=1)
        desc = fused.mean(dim=(2, 3))                              # squeezed descriptor
        attn = self.excite(torch.relu(self.squeeze(desc)))
        attn = attn.view(attn.shape[0], 2, -1).softmax(dim=1)      # over branches
        return (feats * attn.unsqueeze(-1).unsqueeze(-1)).sum(dim=1)

    def extra_flops(self, out_shape) -> int:
        # Functional arithmetic invisible to module hooks: branch sum,
        # global pool, softmax, attention-weighted fusion.
        c, h, w = out_shape[-3:]
        plane = c * h * w
        return plane + plane + 6 * c + 2 * plane + plane


class InvertedBottleneck(nn.Module):
    """MobileNet-style expand -> depthwise -> project, residual when shapes match."""

    def __init__(self, cin: int, cout: int, stride: int = 1, expand: int = 6):
        super().__init__()
        mid = cin * expand
        self.use_residual = stride == 1 and cin == cout
        self.block = nn.Sequential(
            nn.Conv2d(cin, mid, 1, bias=False),
            nn.BatchNorm2d(mid), nn.ReLU6(inplace=True),
            nn.Conv2d(mid, mid, 3, stride=stride, padding=1, groups=mid, bias=False),
            nn.BatchNorm2d(mid), nn.ReLU6(inplace=True),
            nn.Conv2d(mid, cout, 1, bias=False),
            nn.BatchNorm2d(cout))

    def forward(self, x):
        out = self.block(x)
        return x + out if self.use_residual else out

    def extra_flops(self, out_shape) -> int:
        if not self.use_residual:
            return 0
        c, h, w = out_shape[-3:]
        return c * h * w  # residual add


class DownsampleConcat(nn.Module):
    """Stride-2 conv and max-pool in parallel, channel-concatenated.

    Standard entry/downsampling block of the efficient-segmentation
    family; also used between stages of the factorized-conv student.
    """

    def __init__(self, cin: int, cout: int):
        super().__init__()
        if cout <= cin:
            raise ConfigError(f"DownsampleConcat needs cout > cin, got {cin} -> {cout}")
        self.conv = nn.Conv2d(cin, cout - cin, 3, stride=2, padding=1, bias=False)
        self.pool = nn.MaxPool2d(2)
        self.bn = nn.BatchNorm2d(cout)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.bn(torch.cat([self.conv(x), self.pool(x)], dim=1)))


class ENetBottleneck(nn.Module):
    """Narrow 1x1 -> 3x3 -> 1x1 residual block; stride-2 form pools the skip."""

    def __init__(self, cin: int, cout: int, stride: int = 1, reduction: int = 4):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {stride}")
        self.cin, self.cout, self.stride = cin, cout, stride
        mid = max(cout // reduction, 4)
        entry_kernel = 2 if stride == 2 else 1
        self.main = nn.Sequential(
            nn.Conv2d(cin, mid, entry_kernel, stride=stride, bias=False),
            nn.BatchNorm2d(mid), nn.ReLU(inplace=True),
            nn.Conv2d(mid, mid, 3, padding=1, bias=False),
            nn.BatchNorm2d(mid), nn.ReLU(inplace=True),
            nn.Conv2d(mid, cout, 1, bias=False),
            nn.BatchNorm2d(cout))
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        main = self.main(x)
        if self.stride == 2:
            skip = F.max_pool2d(x, 2)
        else:
            skip = x
        if self.cout != self.cin:
            # parameter-free channel match: zero-pad new channels
            pad = self.cout - self.cin
            skip = F.pad(skip, (0, 0, 0, 0, 0, pad))
        return self.act(main + skip)

    def extra_flops(self, out_shape) -> int:
        c, h, w = out_shape[-3:]
        return c * h * w  # residual add (pool and pad are free)


class FactorizedResidual(nn.Module):
    """Two 3x1 + 1x3 factorized conv pairs with a residual connection."""

    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, (3, 1), padding=(1, 0), bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, (1, 3), padding=(0, 1), bias=False),
            nn.BatchNorm2d(channels), nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, (3, 1), padding=(1, 0), bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, (1, 3), padding=(0, 1), bias=False),
            nn.BatchNorm2d(channels))
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(x + self.block(x))

    def extra_flops(self, out_shape) -> int:
        c, h, w = out_shape[-3:]
        return c * h * w


class _Encoder(nn.Module):
    """Stem plus one stage per level; each stage output is a tap."""

    def __init__(self, stem: nn.Module, stages: list[nn.Module]):
        super().__init__()
        self.stem = stem
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        x = self.stem(x)
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps


def _teacher_encoder(channels: list[int], blocks: tuple[int, ...]) -> _Encoder:
    stem = ConvBNReLU(1, channels[0])
    stages = []
    prev = channels[0]
    for i, cout in enumerate(channels):
        layers: list[nn.Module] = [nn.MaxPool2d(2), SKBlock(prev, cout)]
        layers += [SKBlock(cout, cout) for _ in range(blocks[i] - 1)]
        stages.append(nn.Sequential(*layers))
        prev = cout
    return _Encoder(stem, stages)


def _mobile_encoder(channels: list[int], blocks: tuple[int, ...]) -> _Encoder:
    stem = ConvBNReLU(1, channels[0], stride=2)  # expansion convs never run at full res
    stages = []
    prev = channels[0]
    for i, cout in enumerate(channels):
        stride = 1 if i == 0 else 2
        layers: list[nn.Module] = [InvertedBottleneck(prev, cout, stride=stride)]
        layers += [InvertedBottleneck(cout, cout) for _ in range(blocks[i] - 1)]
        stages.append(nn.Sequential(*layers))
        prev = cout
    return _Encoder(stem, stages)


def _enet_encoder(channels: list[int], blocks: tuple[int, ...]) -> _Encoder:
    stages: list[nn.Module] = []
    first: list[nn.Module] = [DownsampleConcat(1, channels[0])]
    first += [ENetBottleneck(channels[0], channels[0]) for _ in range(blocks[0] - 1)]
    stages.append(nn.Sequential(*first))
    prev = channels[0]
    for i in range(1, len(channels)):
        cout = channels[i]
        layers: list[nn.Module] = [ENetBottleneck(prev, cout, stride=2)]
        layers += [ENetBottleneck(cout, cout) for _ in range(blocks[i] - 1)]
        stages.append(nn.Sequential(*layers))
        prev = cout
    return _Encoder(nn.Identity(), stages)


def _erfnet_encoder(channels: list[int], blocks: tuple[int, ...]) -> _Encoder:
    stages: list[nn.Module] = []
    first: list[nn.Module] = [DownsampleConcat(1, channels[0])]
    first += [FactorizedResidual(channels[0]) for _ in range(blocks[0] - 1)]
    stages.append(nn.Sequential(*first))
    prev = channels[0]
    for i in range(1, len(channels)):
        cout = channels[i]
        layers: list[nn.Module] = [DownsampleConcat(prev, cout)]
        layers += [FactorizedResidual(cout) for _ in range(blocks[i] - 1)]
        stages.append(nn.Sequential(*layers))
        prev = cout
    return _Encoder(nn.Identity(), stages)


_ENCODERS = {
    "teacher_sk_unet": _teacher_encoder,
    "student_mobile": _mobile_encoder,
    "student_enet": _enet_encoder,
    "student_erfnet": _erfnet_encoder,
}


class DecoderStage(nn.Module):
    """Upsample x2, concatenate the skip, 1x1 reduce, 3x3 conv."""

    def __init__(self, cin_deep: int, cin_skip: int, cout: int):
        super().__init__()
        self.reduce = ConvBNReLU(cin_deep + cin_skip, cout, kernel=1)
        self.conv = ConvBNReLU(cout, cout, kernel=3)

    def forward(self, deep, skip):
        up = F.interpolate(deep, scale_factor=2, mode="nearest")
        return self.conv(self.reduce(torch.cat([up, skip], dim=1)))


class Decoder(nn.Module):
    """Shared plain decoder; stage outputs mirror the encoder widths."""

    def __init__(self, enc_channels: list[int]):
        super().__init__()
        self.center = ConvBNReLU(enc_channels[-1], enc_channels[-1], kernel=3)
        self.stages = nn.ModuleList([
            DecoderStage(enc_channels[i + 1], enc_channels[i], enc_channels[i])
            for i in range(len(enc_channels) - 2, -1, -1)])

    def forward(self, enc_taps):
        x = self.center(enc_taps[-1])
        dec_taps = [x]  # deepest level first while building
        for stage, skip in zip(self.stages, reversed(enc_taps[:-1])):
            x = stage(x, skip)
            dec_taps.append(x)
        dec_taps.reverse()  # level 1 first, like the encoder taps
        return dec_taps


class Head(nn.Module):
    """3x3 conv at half resolution, upsample, 1x1 conv, sigmoid."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = ConvBNReLU(channels, channels, kernel=3)
        self.out = nn.Conv2d(channels, 1, 1)

    def forward(self, x):
        x = self.conv(x)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return torch.sigmoid(self.out(x))


class SegmentationNetwork(nn.Module):
    """Encoder/decoder segmentation net exposing matched feature taps."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        spec = spec.resolve()
        self.spec = spec
        base = spec.base_channels
        self.enc_channels = [base * 2 ** i for i in range(spec.depth)]
        blocks = _VARIANT_DEFAULTS[spec.variant]["blocks"]
        blocks = tuple(blocks[i] if i < len(blocks) else blocks[-1]
                       for i in range(spec.depth))
        self.encoder = _ENCODERS[spec.variant](self.enc_channels, blocks)
        self.decoder = Decoder(self.enc_channels)
        self.head = Head(self.enc_channels[0])

    def tap_channels(self) -> list[int]:
        """Channel width at each configured tap level."""
        return [self.enc_channels[l - 1] for l in self.spec.tap_levels]

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        factor = 2 ** self.spec.depth
        for name, size in (("height", x.shape[2]), ("width", x.shape[3])):
            if size % factor != 0:
                raise ShapeError(
                    f"input {name} {size} is not divisible by {factor} (depth {self.spec.depth})")
        enc_taps = self.encoder(x)
        dec_taps = self.decoder(enc_taps)
        pred = self.head(dec_taps[0])
        bundle = TapBundle(
            levels=self.spec.tap_levels,
            encoder=[enc_taps[l - 1] for l in self.spec.tap_levels],
            decoder=[dec_taps[l - 1] for l in self.spec.tap_levels])
        return pred, bundle


def init_parameters(net: nn.Module, seed: int = 0) -> None:
    """Deterministic init: fan-in-scaled normal convs/linears, zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)


def build_network(spec: NetworkSpec, init_seed: int = 0) -> SegmentationNetwork:
    """Construct and deterministically initialize a network from its spec."""
    net = SegmentationNetwork(spec)
    init_parameters(net, seed=init_seed)
    return net


def preset(variant: str, size: str = "full") -> NetworkSpec:
    """Frozen configurations: full-scale "full" and CPU-test "tiny".

    The tiny preset keeps the capacity gap of the full models: the
    teacher gets four times the base width of the students so that it
    stays the clearly stronger reference even on toy corpora.
    """
    if size == "full":
        return NetworkSpec(variant=variant).resolve()
    if size == "tiny":
        base = 16 if variant == "teacher_sk_unet" else 4
        return NetworkSpec(variant=variant, depth=3, base_channels=base).resolve()
    raise ConfigError(f"unknown preset size {size!r}")
