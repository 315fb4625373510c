"""2D slice encoder: each axial slice becomes L patch tokens plus one slice token.

Two sources are supported. The built-in encoder is a small pre-norm ViT with
a learned class token, optional register tokens and a learned 2D position
table. The external adapter maps features produced elsewhere (for example by
a pretrained foundation model) into the same token interface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import AdapterError, ConfigError, InputError
from .layers import Block


@dataclass
class EncoderConfig:
    patch_size: int = 14
    channel_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    num_register_tokens: int = 4
    drop_path_rate: float = 0.2
    source: str = "builtin"
    in_chans: int = 1
    max_grid: tuple[int, int] = (16, 16)
    mlp_ratio: float = 4.0

    def __post_init__(self):
        self.max_grid = tuple(self.max_grid)
        if self.channel_dim % self.num_heads:
            raise ConfigError(f"channel_dim {self.channel_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}")
        if self.source not in ("builtin", "external-adapter"):
            raise ConfigError(f"unknown encoder source {self.source!r}")
        if self.patch_size < 1 or self.depth < 1 or self.num_register_tokens < 0:
            raise ConfigError("patch_size and depth must be positive, register count non-negative")

    @classmethod
    def toy(cls, **overrides) -> "EncoderConfig":
        kw = dict(patch_size=7, channel_dim=8, depth=4, num_heads=4, num_register_tokens=0,
                  drop_path_rate=0.0, max_grid=(4, 4))
        kw.update(overrides)
        return cls(**kw)

    def grid_for(self, height: int, width: int) -> tuple[int, int]:
        s = self.patch_size
        if height % s or width % s:
            raise ConfigError(f"slice {height}x{width} not divisible by patch size {s}")
        return height // s, width // s


@dataclass
class SliceTokens:
    patch_tokens: torch.Tensor  # (L, C)
    slice_token: torch.Tensor  # (C,)
    grid_shape: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid_shape
        if self.patch_tokens.shape[0] != h * w:
            raise AdapterError(f"{self.patch_tokens.shape[0]} patch tokens for grid {h}x{w}")


class SliceEncoder(nn.Module):
    """Built-in ViT stand-in for the pretrained 2D encoder."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config.channel_dim
        s = config.patch_size
        self.patch_embed = nn.Conv2d(config.in_chans, c, kernel_size=s, stride=s)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c))
        self.register_tokens = nn.Parameter(torch.zeros(1, config.num_register_tokens, c))
        gh, gw = config.max_grid
        self.pos_embed = nn.Parameter(torch.zeros(gh, gw, c))
        dpr = torch.linspace(0, config.drop_path_rate, config.depth).tolist()
        self.blocks = nn.ModuleList(
            Block(c, config.num_heads, config.mlp_ratio, drop_path=p) for p in dpr
        )
        self.norm = nn.LayerNorm(c)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.normal_(self.cls_token, std=1e-6)
        if config.num_register_tokens:
            nn.init.normal_(self.register_tokens, std=1e-6)

    def _prepare(self, slices: torch.Tensor) -> torch.Tensor:
        if slices.ndim == 3:
            slices = slices.unsqueeze(1)
        if slices.ndim != 4:
            raise InputError(f"expected (B, H, W) or (B, C, H, W) slices, got shape {tuple(slices.shape)}")
        if slices.shape[1] == 1 and self.config.in_chans > 1:
            slices = slices.expand(-1, self.config.in_chans, -1, -1)
        if not torch.isfinite(slices).all():
            raise InputError("slice intensities must be finite")
        return slices

    def forward(self, slices: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, tuple[int, int]]:
        """Encode a batch of slices.

        Returns ``(patch_tokens (B, L, C), slice_tokens (B, C), (h, w))`` with
        patch tokens in row-major grid order. Register tokens take part in
        attention and are dropped from the output.
        """
        x = self._prepare(slices)
        h, w = self.config.grid_for(x.shape[-2], x.shape[-1])
        gh, gw = self.config.max_grid
        if h > gh or w > gw:
            raise ConfigError(f"patch grid {h}x{w} exceeds position table {gh}x{gw}")
        b = x.shape[0]
        patches = self.patch_embed(x).flatten(2).transpose(1, 2)
        patches = patches + self.pos_embed[:h, :w].reshape(h * w, -1)
        r = self.config.num_register_tokens
        tokens = torch.cat(
            [self.cls_token.expand(b, -1, -1), self.register_tokens.expand(b, -1, -1), patches], dim=1
        )
        for blk in self.blocks:
            tokens = blk(tokens)
        tokens = self.norm(tokens)
        return tokens[:, 1 + r:], tokens[:, 0], (h, w)


def encode_slice(slice_: torch.Tensor, encoder: SliceEncoder) -> SliceTokens:
    patch, cls, grid = encoder(slice_.unsqueeze(0))
    return SliceTokens(patch[0], cls[0], grid)


def encode_volume(volume: torch.Tensor, encoder: SliceEncoder) -> list[SliceTokens]:
    """Encode every axial slice of a (D, H, W) volume independently."""
    if volume.ndim != 3 or volume.shape[0] == 0:
        raise InputError(f"expected a non-empty (D, H, W) volume, got shape {tuple(volume.shape)}")
    patch, cls, grid = encoder(volume)
    return [SliceTokens(patch[i], cls[i], grid) for i in range(volume.shape[0])]


class ExternalAdapter(nn.Module):
    """Map externally computed per-slice features into :class:`SliceTokens`.

    Features of width ``external_channels`` are projected to the internal
    channel width by a trainable linear layer when the widths differ, and
    passed through unchanged otherwise.
    """

    def __init__(self, external_channels: int, config: EncoderConfig, image_hw: tuple[int, int]):
        super().__init__()
        self.config = config
        self.expected_grid = config.grid_for(*image_hw)
        if external_channels == config.channel_dim:
            self.proj = nn.Identity()
        else:
            self.proj = nn.Linear(external_channels, config.channel_dim)
        self.external_channels = external_channels

    def forward(self, patch_features, class_feature, grid: tuple[int, int]) -> SliceTokens:
        if class_feature is None:
            raise AdapterError("external features carry no class-token embedding")
        grid = tuple(grid)
        if grid != self.expected_grid:
            raise AdapterError(
                f"external patch grid {grid} does not match {self.expected_grid} for patch size {self.config.patch_size}"
            )
        patch_features = torch.as_tensor(patch_features)
        class_feature = torch.as_tensor(class_feature)
        if patch_features.shape != (grid[0] * grid[1], self.external_channels):
            raise AdapterError(f"patch features of shape {tuple(patch_features.shape)} for grid {grid}")
        if class_feature.shape != (self.external_channels,):
            raise AdapterError("class token width differs from patch token width")
        return SliceTokens(self.proj(patch_features), self.proj(class_feature), grid)

    def forward_volume(self, slices: list[dict]) -> tuple[torch.Tensor, torch.Tensor, tuple[int, int]]:
        toks = [self(s["patch"], s["cls"], s["grid"]) for s in slices]
        return (torch.stack([t.patch_tokens for t in toks]), torch.stack([t.slice_token for t in toks]),
                toks[0].grid_shape)


def write_external_slice(path: Path, patch: np.ndarray, cls: np.ndarray | None, grid: tuple[int, int]) -> None:
    """Write one slice in the adapter's on-disk layout (class row first, then patch rows)."""
    path = Path(path)
    rows = patch if cls is None else np.concatenate([cls[None], patch], axis=0)
    rows.astype("<f4").tofile(path.with_suffix(".f32"))
    meta = {"grid_h": int(grid[0]), "grid_w": int(grid[1]), "channels": int(patch.shape[1])}
    path.with_suffix(".json").write_text(json.dumps(meta))


def read_external_slice(path: Path) -> dict:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    payload = path.with_suffix(".f32")
    try:
        meta = json.loads(sidecar.read_text())
        data = np.fromfile(payload, dtype="<f4")
    except (OSError, ValueError) as exc:
        raise AdapterError(f"cannot read external features {path}: {exc}") from exc
    h, w, c = meta["grid_h"], meta["grid_w"], meta["channels"]
    n_patch = h * w * c
    if data.size == n_patch:
        raise AdapterError(f"{payload}: no class-token row in external features")
    if data.size != n_patch + c:
        raise AdapterError(f"{payload}: {data.size} values, expected {n_patch + c}")
    rows = data.reshape(h * w + 1, c)
    return {"cls": torch.from_numpy(rows[0].copy()), "patch": torch.from_numpy(rows[1:].copy()), "grid": (h, w)}


def read_external_dir(directory: Path) -> list[dict]:
    files = sorted(Path(directory).glob("*.f32"))
    if not files:
        raise AdapterError(f"no external feature files in {directory}")
    return [read_external_slice(f) for f in files]
