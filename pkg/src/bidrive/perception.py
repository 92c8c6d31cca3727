"""Two-stream visual perception network.

The ventral stream (V1 -> V2 -> V4 -> IT) is a stack of recurrent bottleneck
conv blocks producing an appearance embedding. The dorsal stream compares the
current and previous frame through spatially adaptive filters generated from
the current appearance map, producing a motion embedding. Both streams share
the V1 front end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .substrate import ChannelNorm, ConfigError, ShapeError, conv2d


@dataclass(frozen=True)
class PerceptionConfig:
    frame_channels: int = 3
    frame_size: int = 96          # H == W, must be divisible by 32
    v1_width: int = 64
    ventral_widths: tuple[int, int, int] = (128, 256, 512)
    recurrence: tuple[int, int, int] = (2, 4, 2)   # V2, V4, IT unroll counts
    bottleneck_ratio: int = 4
    filter_kernel: int = 3
    dorsal_width: int = 256

    def __post_init__(self):
        if self.frame_size < 16:
            raise ConfigError(f"frame_size {self.frame_size} must be >= 16")
        if any(t < 1 for t in self.recurrence):
            raise ConfigError(f"recurrence counts must be >= 1, got {self.recurrence}")

    @property
    def appearance_grid(self) -> int:
        # Five ceil-halving stages: V1 conv, V1 pool, V2, V4, IT.
        # Equals frame_size / 32 whenever frame_size is divisible by 32.
        n = self.frame_size
        for _ in range(5):
            n = (n - 1) // 2 + 1
        return n

    @property
    def motion_grid(self) -> int:
        # Four ceil-halving stages: V1 conv, V1 pool, MT, MST.
        n = self.frame_size
        for _ in range(4):
            n = (n - 1) // 2 + 1
        return n

    @property
    def appearance_channels(self) -> int:
        return self.ventral_widths[-1]


class VisualFrontEnd(nn.Module):
    """First learned stage: 7x7 stride-2 conv, maxpool, 3x3 conv.

    Convs are bias-free and use replicate padding so a spatially constant
    frame maps to a spatially constant feature map (the motion stream's
    zero-motion property relies on this).
    """

    def __init__(self, in_channels: int = 3, width: int = 64):
        super().__init__()
        self.conv1 = nn.Conv2d(
            in_channels, width, 7, stride=2, padding=3,
            padding_mode="replicate", bias=False,
        )
        self.norm1 = ChannelNorm(width)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(
            width, width, 3, padding=1, padding_mode="replicate", bias=False
        )
        self.norm2 = ChannelNorm(width)

    def forward(self, frame: Tensor) -> Tensor:
        if frame.dim() != 4:
            raise ShapeError(f"expected (batch, C, H, W) frame, got {tuple(frame.shape)}")
        x = F.relu(self.norm1(self.conv1(frame)))
        x = self.pool(x)
        return F.relu(self.norm2(self.conv2(x)))


class RecurrentBottleneck(nn.Module):
    """Bottleneck conv block unrolled `steps` times with shared conv weights.

    Each pass runs 1x1 reduce -> 3x3 -> 1x1 expand with a residual connection
    and feeds its output back in as the next input. The first pass downsamples
    by 2 (3x3 stride 2 plus a strided 1x1 skip). Conv weights are shared across
    passes; normalization layers are distinct per pass, so the trainable
    parameter count depends on `steps` only through norm gains/biases.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        steps: int,
        bottleneck_ratio: int = 4,
    ):
        super().__init__()
        if steps < 1:
            raise ConfigError(f"recurrence steps must be >= 1, got {steps}")
        self.steps = steps
        mid = out_channels // bottleneck_ratio
        self.conv_input = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.conv_skip = nn.Conv2d(out_channels, out_channels, 1, stride=2, bias=False)
        self.norm_skip = ChannelNorm(out_channels)
        self.conv_reduce = nn.Conv2d(out_channels, mid, 1, bias=False)
        self.conv_mid = nn.Conv2d(mid, mid, 3, padding=1, bias=False)
        self.conv_expand = nn.Conv2d(mid, out_channels, 1, bias=False)
        self.norms_reduce = nn.ModuleList(ChannelNorm(mid) for _ in range(steps))
        self.norms_mid = nn.ModuleList(ChannelNorm(mid) for _ in range(steps))
        self.norms_expand = nn.ModuleList(ChannelNorm(out_channels) for _ in range(steps))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.conv_input.in_channels:
            raise ShapeError(
                f"block expects {self.conv_input.in_channels} input channels, "
                f"got {x.shape[1]}"
            )
        x = self.conv_input(x)
        for t in range(self.steps):
            if t == 0:
                skip = self.norm_skip(self.conv_skip(x))
                stride = 2
            else:
                skip = x
                stride = 1
            y = F.relu(self.norms_reduce[t](self.conv_reduce(x)))
            y = conv2d(y, self.conv_mid.weight, stride=stride, padding=1)
            y = F.relu(self.norms_mid[t](y))
            y = self.norms_expand[t](self.conv_expand(y))
            x = F.relu(y + skip)
        return x


class DynamicFilterHead(nn.Module):
    """Generates a per-location K x K filter from an appearance feature map.

    Output has K*K channels; a softmax across those channels makes every
    per-location filter sum to 1. The head's receptive field is 3x3, so a
    single-cell change in the input only moves filters within one cell of it.
    """

    def __init__(self, in_channels: int, kernel_size: int = 3, hidden: int | None = None):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ConfigError(f"filter kernel size must be odd, got {kernel_size}")
        self.kernel_size = kernel_size
        hidden = hidden or in_channels
        self.conv1 = nn.Conv2d(
            in_channels, hidden, 3, padding=1, padding_mode="replicate", bias=False
        )
        self.conv2 = nn.Conv2d(hidden, kernel_size * kernel_size, 1)

    def forward(self, appearance: Tensor) -> Tensor:
        taps = self.conv2(F.relu(self.conv1(appearance)))
        return torch.softmax(taps, dim=1)


def apply_dynamic_filters(x: Tensor, filters: Tensor) -> Tensor:
    """Apply per-location filters (B, K*K, H, W) to every channel of x.

    Edge positions use replicate padding, so filters that sum to 1 reproduce
    spatially constant inputs exactly up to rounding.
    """
    b, c, h, w = x.shape
    k2 = filters.shape[1]
    k = int(round(k2**0.5))
    if k * k != k2:
        raise ShapeError(f"filter bank channel count {k2} is not a square")
    if filters.shape[-2:] != x.shape[-2:]:
        raise ShapeError(
            f"filter grid {tuple(filters.shape[-2:])} does not match "
            f"feature grid {tuple(x.shape[-2:])}"
        )
    pad = k // 2
    patches = F.unfold(F.pad(x, (pad,) * 4, mode="replicate"), k)
    patches = patches.view(b, c, k2, h, w)
    return (patches * filters.unsqueeze(1)).sum(dim=2)


class MotionStream(nn.Module):
    """Dorsal pathway: dynamic filtering of the frame-to-frame difference.

    The residual used downstream is the dynamic filters applied to
    (feat_t - feat_prev); identical feature maps therefore give an exactly
    zero residual. Two stride-2 conv stages (MT / MST analogs) downsample the
    residual into the motion embedding.
    """

    def __init__(self, in_channels: int = 64, width: int = 256, kernel_size: int = 3):
        super().__init__()
        self.filter_head = DynamicFilterHead(in_channels, kernel_size)
        self.conv_mt = nn.Conv2d(in_channels, width // 2, 3, stride=2, padding=1, bias=False)
        self.norm_mt = ChannelNorm(width // 2)
        self.conv_mst = nn.Conv2d(width // 2, width, 3, stride=2, padding=1, bias=False)
        self.norm_mst = ChannelNorm(width)

    def generate_filters(self, appearance: Tensor) -> Tensor:
        return self.filter_head(appearance)

    def residual(self, feat_t: Tensor, feat_prev: Tensor, filters: Tensor) -> Tensor:
        if feat_t.shape != feat_prev.shape:
            raise ShapeError(
                f"feature maps differ in shape: {tuple(feat_t.shape)} vs "
                f"{tuple(feat_prev.shape)}"
            )
        return apply_dynamic_filters(feat_t - feat_prev, filters)

    def forward(self, feat_t: Tensor, feat_prev: Tensor, filters: Tensor | None = None) -> Tensor:
        if filters is None:
            filters = self.generate_filters(feat_t)
        res = self.residual(feat_t, feat_prev, filters)
        x = F.relu(self.norm_mt(self.conv_mt(res)))
        return F.relu(self.norm_mst(self.conv_mst(x)))


class PerceptionNet(nn.Module):
    """Full two-stream perception network.

    forward(frame_t, frame_prev) -> (appearance_embedding, motion_embedding)
    with shapes (B, C_it, H/32, W/32) and (B, dorsal_width, H/16, W/16).
    """

    def __init__(self, cfg: PerceptionConfig | None = None):
        super().__init__()
        cfg = cfg or PerceptionConfig()
        self.cfg = cfg
        self.v1 = VisualFrontEnd(cfg.frame_channels, cfg.v1_width)
        widths = (cfg.v1_width,) + cfg.ventral_widths
        self.v2 = RecurrentBottleneck(widths[0], widths[1], cfg.recurrence[0], cfg.bottleneck_ratio)
        self.v4 = RecurrentBottleneck(widths[1], widths[2], cfg.recurrence[1], cfg.bottleneck_ratio)
        self.it = RecurrentBottleneck(widths[2], widths[3], cfg.recurrence[2], cfg.bottleneck_ratio)
        self.motion = MotionStream(cfg.v1_width, cfg.dorsal_width, cfg.filter_kernel)

    def ventral(self, feat_v1: Tensor) -> Tensor:
        return self.it(self.v4(self.v2(feat_v1)))

    def forward(self, frame_t: Tensor, frame_prev: Tensor) -> tuple[Tensor, Tensor]:
        feat_t = self.v1(frame_t)
        feat_prev = self.v1(frame_prev)
        appearance = self.ventral(feat_t)
        motion = self.motion(feat_t, feat_prev)
        return appearance, motion
