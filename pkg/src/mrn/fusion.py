"""Volume fusion: slice position embeddings, FFA and SFA stacks.

Token layout used throughout: patch tokens ``(B, D, L, C)`` and slice tokens
``(B, D, C)``. Inside an FFA layer each slice's slice token is placed in front
of its L patch tokens, giving ``(B, D, L + 1, C)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError
from .layers import Block


@dataclass
class FusionConfig:
    num_ffa_layers: int = 3
    num_sfa_layers: int = 2
    num_heads: int = 12
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.0
    max_depth: int = 64

    def __post_init__(self):
        if self.num_ffa_layers < 1 or self.num_sfa_layers < 1:
            raise ConfigError("need at least one FFA layer and one SFA layer")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}")


@dataclass
class TokenField:
    patch_tokens: torch.Tensor  # (B, D, L, C)
    slice_tokens: torch.Tensor  # (B, D, C)

    def __post_init__(self):
        p, s = self.patch_tokens, self.slice_tokens
        if p.ndim != 4 or s.ndim != 3 or p.shape[:2] != s.shape[:2] or p.shape[-1] != s.shape[-1]:
            raise ShapeError(f"inconsistent token field: patch {tuple(p.shape)}, slice {tuple(s.shape)}")


@dataclass
class FfaTrace:
    global_patches: list[torch.Tensor] = field(default_factory=list)
    local_patches: list[torch.Tensor] = field(default_factory=list)

    def __len__(self):
        return len(self.global_patches)


def add_slice_positions(tokens: TokenField, table: torch.Tensor) -> TokenField:
    """Add row ``i`` of the slice position table to every patch token of slice ``i``.

    Slice tokens are left untouched.
    """
    d = tokens.patch_tokens.shape[1]
    if d > table.shape[0]:
        raise ConfigError(f"volume depth {d} exceeds slice position table capacity {table.shape[0]}")
    return TokenField(tokens.patch_tokens + table[:d][None, :, None, :], tokens.slice_tokens)


class FfaLayer(nn.Module):
    """Global attention over all D*(L+1) tokens, then per-slice local attention."""

    def __init__(self, dim, num_heads, mlp_ratio=4.0, drop_path=0.0):
        super().__init__()
        self.global_block = Block(dim, num_heads, mlp_ratio, drop_path)
        self.local_block = Block(dim, num_heads, mlp_ratio, drop_path)

    @staticmethod
    def _join(tokens: TokenField) -> torch.Tensor:
        return torch.cat([tokens.slice_tokens.unsqueeze(2), tokens.patch_tokens], dim=2)

    @staticmethod
    def _split(x: torch.Tensor) -> TokenField:
        return TokenField(x[:, :, 1:], x[:, :, 0])

    def global_step(self, tokens: TokenField) -> TokenField:
        x = self._join(tokens)
        b, d, n, c = x.shape
        x = self.global_block(x.reshape(b, d * n, c)).reshape(b, d, n, c)
        return self._split(x)

    def local_step(self, tokens: TokenField) -> TokenField:
        x = self._join(tokens)
        b, d, n, c = x.shape
        x = self.local_block(x.reshape(b * d, n, c)).reshape(b, d, n, c)
        return self._split(x)

    def forward(self, tokens: TokenField):
        g = self.global_step(tokens)
        loc = self.local_step(g)
        return loc, (g.patch_tokens, loc.patch_tokens)


class VolumeFusion(nn.Module):
    """Slice positions + N FFA layers + M SFA blocks over a learned ROI token."""

    def __init__(self, dim: int, config: FusionConfig):
        super().__init__()
        self.config = config
        self.slice_pos = nn.Parameter(torch.zeros(config.max_depth, dim))
        self.ffa = nn.ModuleList(
            FfaLayer(dim, config.num_heads, config.mlp_ratio, config.drop_path_rate)
            for _ in range(config.num_ffa_layers)
        )
        self.roi_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.sfa = nn.ModuleList(
            Block(dim, config.num_heads, config.mlp_ratio, config.drop_path_rate)
            for _ in range(config.num_sfa_layers)
        )
        nn.init.trunc_normal_(self.slice_pos, std=0.02)
        nn.init.normal_(self.roi_token, std=0.02)

    def add_slice_positions(self, tokens: TokenField) -> TokenField:
        return add_slice_positions(tokens, self.slice_pos)

    def ffa_stack(self, tokens: TokenField) -> tuple[TokenField, FfaTrace]:
        trace = FfaTrace()
        for layer in self.ffa:
            tokens, (g, loc) = layer(tokens)
            trace.global_patches.append(g)
            trace.local_patches.append(loc)
        return tokens, trace

    def sfa_stack(self, slice_tokens: torch.Tensor) -> torch.Tensor:
        """Prepend the ROI seed token to ``(B, D, C)`` slice tokens and return the refined ROI token ``(B, C)``."""
        if slice_tokens.ndim != 3 or slice_tokens.shape[1] < 1:
            raise ShapeError(f"expected (B, D>=1, C) slice tokens, got {tuple(slice_tokens.shape)}")
        x = torch.cat([self.roi_token.expand(slice_tokens.shape[0], -1, -1), slice_tokens], dim=1)
        for blk in self.sfa:
            x = blk(x)
        return x[:, 0]

    def forward(self, tokens: TokenField) -> tuple[TokenField, FfaTrace, torch.Tensor]:
        tokens = self.add_slice_positions(tokens)
        tokens, trace = self.ffa_stack(tokens)
        return tokens, trace, self.sfa_stack(tokens.slice_tokens)
