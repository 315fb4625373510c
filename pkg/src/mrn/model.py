"""RES branch (encoder -> fusion -> DPT/SFA) and the four-ROI MRN classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dpt import DptConfig, DptHead, select_dpt_features
from .errors import NumericalError, ShapeError
from .fusion import FusionConfig, TokenField, VolumeFusion
from .rois import ROI_ORDER
from .slice_encoder import EncoderConfig, SliceEncoder


@dataclass
class MRNConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    dpt: DptConfig = field(default_factory=DptConfig)
    proj_dim: int = 128
    cls_dropout: float = 0.5
    proj_bias: bool = True

    @classmethod
    def toy(cls, channels=8, depth=2, heads=2, patch_size=7, max_grid=(4, 4), ffa=2, sfa=1, num_classes=2,
            proj_dim=8, proj_channels=(4, 8, 8, 8), fusion_channels=8) -> "MRNConfig":
        return cls(
            encoder=EncoderConfig.toy(channel_dim=channels, depth=depth, num_heads=heads, patch_size=patch_size,
                                      max_grid=max_grid),
            fusion=FusionConfig(num_ffa_layers=ffa, num_sfa_layers=sfa, num_heads=heads, max_depth=16),
            dpt=DptConfig(projection_channels=proj_channels, fusion_channels=fusion_channels,
                          num_classes=num_classes),
            proj_dim=proj_dim,
        )


class RES(nn.Module):
    """ROI feature extraction and segmentation for one ROI volume batch."""

    def __init__(self, config: MRNConfig):
        super().__init__()
        c = config.encoder.channel_dim
        self.config = config
        self.encoder = SliceEncoder(config.encoder)
        self.fusion = VolumeFusion(c, config.fusion)
        self.dpt = DptHead(c, config.dpt)

    def forward_tokens(self, patch, slice_tokens, grid, out_hw, with_seg: bool = True):
        """Fuse pre-computed slice tokens ``(B, D, L, C)`` / ``(B, D, C)``."""
        tokens, trace, roi_token = self.fusion(TokenField(patch, slice_tokens))
        if not with_seg:
            return None, roi_token
        feats = select_dpt_features(trace, patch, self.config.dpt.selection_mode)
        return self.dpt(feats, grid, out_hw), roi_token

    def forward(self, volumes: torch.Tensor, with_seg: bool = True):
        """``(B, D, H, W)`` -> ``(seg logits (B, D, K, H, W) or None, roi token (B, C))``."""
        if volumes.ndim != 4:
            raise ShapeError(f"expected (B, D, H, W) volumes, got {tuple(volumes.shape)}")
        b, d, h, w = volumes.shape
        patch, cls, grid = self.encoder(volumes.reshape(b * d, h, w))
        patch = patch.reshape(b, d, *patch.shape[1:])
        cls = cls.reshape(b, d, -1)
        return self.forward_tokens(patch, cls, grid, (h, w), with_seg)


def res_forward(volume: torch.Tensor, res: RES, with_seg: bool = True):
    """Single-volume convenience wrapper: ``(D, H, W)`` -> ``(SegMap (D, K, H, W), roi token (C,))``."""
    seg, tok = res(volume.unsqueeze(0), with_seg)
    return (None if seg is None else seg[0]), tok[0]


class ClassificationHead(nn.Module):
    def __init__(self, in_dim: int, dropout: float = 0.5):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, in_dim // 2)
        self.drop = nn.Dropout(dropout)
        self.fc2 = nn.Linear(in_dim // 2, 2)

    def forward(self, r):
        return self.fc2(self.drop(F.gelu(self.fc1(r))))


class ProjectionHead(nn.Module):
    """Two-layer MLP followed by L2 normalisation onto the unit sphere."""

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, in_dim, bias=bias)
        self.fc2 = nn.Linear(in_dim, out_dim, bias=bias)

    def forward(self, r):
        z = self.fc2(F.relu(self.fc1(r)))
        norm = z.norm(dim=-1, keepdim=True)
        if bool((norm < 1e-12).any()):
            raise NumericalError("projection collapsed to the zero vector before normalisation")
        return z / norm


@dataclass
class MRNOutput:
    class_logits: torch.Tensor  # (B, 2)
    segmaps: dict  # name -> (B, D, K, H, W), empty when segmentation is skipped
    r: torch.Tensor  # (B, 4C)


class MRN(nn.Module):
    """Four ROI branches sharing one RES, concatenated in the fixed order NM, QSM1, QSM2, QSM3."""

    def __init__(self, config: MRNConfig):
        super().__init__()
        self.config = config
        c = config.encoder.channel_dim
        self.res = RES(config)
        self.cls_head = ClassificationHead(4 * c, config.cls_dropout)
        self.proj_head = ProjectionHead(4 * c, config.proj_dim, config.proj_bias)

    def representation(self, rois: dict, with_seg: bool = True):
        tokens, segmaps = [], {}
        for name in ROI_ORDER:
            seg, tok = self.res(rois[name], with_seg)
            tokens.append(tok)
            if seg is not None:
                segmaps[name] = seg
        return torch.cat(tokens, dim=-1), segmaps

    def forward(self, rois: dict, with_seg: bool = True) -> MRNOutput:
        r, segmaps = self.representation(rois, with_seg)
        return MRNOutput(self.cls_head(r), segmaps, r)

    def project(self, r: torch.Tensor) -> torch.Tensor:
        return self.proj_head(r)


def classify(r: torch.Tensor, head: ClassificationHead) -> torch.Tensor:
    if r.shape[-1] != head.fc1.in_features:
        raise ShapeError(f"patient representation length {r.shape[-1]} != {head.fc1.in_features}")
    return head(r)
