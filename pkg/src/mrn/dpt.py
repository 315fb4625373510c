"""Dense-prediction segmentation head over selected FFA snapshots.

Four token sets (shallow to deep) are unpatchified into feature maps,
resampled onto a pyramid that starts at quarter input resolution and halves
at each level, and fused from the deepest level upwards with residual
convolution units. The quarter-resolution logits are finally resized to the
full slice resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .fusion import FfaTrace


@dataclass
class DptConfig:
    selection_mode: str = "local"
    projection_channels: tuple[int, int, int, int] = (96, 192, 384, 768)
    fusion_channels: int = 256
    num_classes: int = 2

    def __post_init__(self):
        self.projection_channels = tuple(self.projection_channels)
        self.selection_mode = self.selection_mode.lower()
        if self.selection_mode not in ("global", "local"):
            raise ConfigError(f"selection_mode must be 'global' or 'local', got {self.selection_mode!r}")
        if len(self.projection_channels) != 4:
            raise ConfigError("exactly four projection channel counts are required")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2 (background + one nucleus)")


def select_dpt_features(trace: FfaTrace, encoder_final: torch.Tensor, mode: str) -> list[torch.Tensor]:
    """Pick the four token sets fed to the head, ordered shallow to deep.

    With N >= 3 FFA layers: the encoder's final tokens plus the global-attention
    snapshots of the last three layers; in local mode the last entry is the
    local-attention snapshot of the final layer instead. With N == 2 the three
    FFA slots are the last three snapshots in execution order ending at the
    mode's final snapshot (global: g1, l1, g2; local: g1, g2, l2).
    """
    mode = mode.lower()
    if mode not in ("global", "local"):
        raise ConfigError(f"unknown selection mode {mode!r}")
    n = len(trace)
    g, loc = trace.global_patches, trace.local_patches
    if n < 2:
        raise ConfigError(f"DPT feature selection needs at least 2 FFA layers, trace has {n}")
    if n == 2:
        ffa = [g[0], loc[0], g[1]] if mode == "global" else [g[0], g[1], loc[1]]
    else:
        ffa = [g[n - 3], g[n - 2], g[n - 1] if mode == "global" else loc[n - 1]]
    return [encoder_final] + ffa


def unpatchify(tokens: torch.Tensor, grid: tuple[int, int], projection: nn.Module | None = None) -> torch.Tensor:
    """``(N, L, C)`` row-major tokens -> ``(N, c_l, h, w)`` feature map."""
    h, w = grid
    n, length, c = tokens.shape
    if length != h * w:
        raise ShapeError(f"{length} tokens cannot fill a {h}x{w} grid")
    fmap = tokens.transpose(1, 2).reshape(n, c, h, w)
    return fmap if projection is None else projection(fmap)


def pyramid_sizes(height: int, width: int) -> list[tuple[int, int]]:
    sizes = [(height // 4, width // 4)]
    for _ in range(3):
        h, w = sizes[-1]
        sizes.append((math.ceil(h / 2), math.ceil(w / 2)))
    return sizes


class ResidualConvUnit(nn.Module):
    def __init__(self, channels: int, linear: bool = False):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=not linear)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=not linear)
        self.act = nn.Identity() if linear else nn.GELU()

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(self.act(x))))


class FusionBlock(nn.Module):
    def __init__(self, channels: int, linear: bool = False):
        super().__init__()
        self.skip_unit = ResidualConvUnit(channels, linear)
        self.unit = ResidualConvUnit(channels, linear)
        self.out_conv = nn.Conv2d(channels, channels, 1, bias=not linear)

    def forward(self, x, skip=None):
        if skip is not None:
            x = x + self.skip_unit(skip)
        return self.out_conv(self.unit(x))


class DptHead(nn.Module):
    """Segmentation head; ``linear=True`` drops biases and activations (used to test additivity)."""

    def __init__(self, dim: int, config: DptConfig, linear: bool = False):
        super().__init__()
        self.config = config
        fc = config.fusion_channels
        self.projections = nn.ModuleList(
            nn.Conv2d(dim, c, 1, bias=not linear) for c in config.projection_channels
        )
        self.layer_rn = nn.ModuleList(
            nn.Conv2d(c, fc, 3, padding=1, bias=False) for c in config.projection_channels
        )
        self.fusion = nn.ModuleList(FusionBlock(fc, linear) for _ in range(4))
        half = max(fc // 2, 1)
        self.head = nn.Sequential(
            nn.Conv2d(fc, half, 3, padding=1, bias=not linear),
            nn.Identity() if linear else nn.GELU(),
            nn.Conv2d(half, config.num_classes, 1, bias=not linear),
        )

    def fuse(self, maps: list[torch.Tensor], out_hw: tuple[int, int]) -> torch.Tensor:
        """Fuse four projected maps ``(N, c_l, h, w)`` into quarter-resolution logits ``(N, K, H/4, W/4)``."""
        if len(maps) != 4:
            raise ShapeError(f"expected 4 feature maps, got {len(maps)}")
        height, width = out_hw
        if height % 4 or width % 4:
            raise ConfigError(f"slice size {height}x{width} must be divisible by 4")
        sizes = pyramid_sizes(height, width)
        levels = []
        for fmap, size, rn in zip(maps, sizes, self.layer_rn):
            if fmap.shape[-2:] != size:
                fmap = F.interpolate(fmap, size=size, mode="bilinear", align_corners=False)
            levels.append(rn(fmap))
        path = self.fusion[3](levels[3])
        for i in (2, 1, 0):
            path = F.interpolate(path, size=levels[i].shape[-2:], mode="bilinear", align_corners=False)
            if path.shape != levels[i].shape:
                raise ShapeError(f"fusion level {i}: {tuple(path.shape)} vs {tuple(levels[i].shape)}")
            path = self.fusion[i](path, levels[i])
        return self.head(path)

    def forward(self, features: list[torch.Tensor], grid: tuple[int, int], out_hw: tuple[int, int]) -> torch.Tensor:
        """Segment a batch of volumes.

        ``features`` are four ``(B, D, L, C)`` token sets; returns logits of
        shape ``(B, D, K, H, W)``.
        """
        b, d = features[0].shape[:2]
        maps = [
            unpatchify(f.reshape(b * d, f.shape[2], f.shape[3]), grid, proj)
            for f, proj in zip(features, self.projections)
        ]
        logits = self.fuse(maps, out_hw)
        logits = F.interpolate(logits, size=tuple(out_hw), mode="bilinear", align_corners=False)
        return logits.reshape(b, d, *logits.shape[1:])
