"""Training objectives: weighted CE + soft Dice segmentation, classification CE, weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DataError

DICE_EPS = 1e-5


@dataclass
class LossWeights:
    seg: float = 1.0
    cl: float = 1.0
    stage: str = "finetune"

    def __post_init__(self):
        if self.seg < 0 or self.cl < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown stage {self.stage!r}")


def merge_lr_labels(label_grid: np.ndarray, merge_table: dict[int, int]) -> np.ndarray:
    """Relabel every voxel through ``merge_table`` (raw id -> merged id)."""
    label_grid = np.asarray(label_grid)
    present = np.unique(label_grid)
    missing = [int(v) for v in present if int(v) not in merge_table]
    if missing:
        raise DataError(f"label ids {missing} have no entry in the merge table")
    lut = np.zeros(max(merge_table) + 1, dtype=np.uint8)
    for raw, merged in merge_table.items():
        lut[raw] = merged
    return lut[label_grid]


def segmap_to_nk(logits: torch.Tensor) -> torch.Tensor:
    """``(B, D, K, H, W)`` segmentation logits -> ``(B, K, D, H, W)``."""
    return logits.transpose(1, 2)


def _check_target(target: torch.Tensor, k: int) -> torch.Tensor:
    target = target.long()
    if target.numel() and (int(target.max()) >= k or int(target.min()) < 0):
        raise DataError(f"target label outside [0, {k})")
    return target


def wce_weights(label_grid: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Per-class weight ``1 - share of voxels with that label`` for one image."""
    target = _check_target(torch.as_tensor(label_grid), num_classes)
    counts = torch.bincount(target.reshape(-1), minlength=num_classes).to(torch.float64)
    return 1.0 - counts / target.numel()


def weighted_ce(logits: torch.Tensor, target: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over voxels of ``-w[y] * log softmax(logits)[y]``.

    ``logits`` is ``(N, K, *spatial)`` and ``target`` ``(N, *spatial)``.
    ``weights`` may be ``(K,)`` or per image ``(N, K)``; by default they are
    computed per image with :func:`wce_weights`.
    """
    n, k = logits.shape[:2]
    target = _check_target(target, k)
    if weights is None:
        weights = torch.stack([wce_weights(t, k) for t in target])
    weights = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device)
    if weights.ndim == 1:
        weights = weights.expand(n, k)
    logp = torch.log_softmax(logits, dim=1)
    picked = torch.gather(logp, 1, target.unsqueeze(1)).squeeze(1)
    w = torch.gather(weights, 1, target.reshape(n, -1)).reshape(target.shape)
    return -(w * picked).mean()


def dice_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss over softmax probabilities.

    For each image, ``1 - 2 sum(p*y) / (sum(p) + sum(y) + eps)`` is averaged
    over the foreground classes present in that image's target, then averaged
    over images that contain any foreground.
    """
    n, k = logits.shape[:2]
    target = _check_target(target, k)
    prob = torch.softmax(logits, dim=1).reshape(n, k, -1)
    onehot = F.one_hot(target.reshape(n, -1), k).transpose(1, 2).to(prob.dtype)
    inter = (prob * onehot).sum(-1)
    denom = prob.sum(-1) + onehot.sum(-1) + eps
    per_class = 1.0 - 2.0 * inter / denom
    present = (onehot.sum(-1) > 0)
    present[:, 0] = False
    counts = present.sum(1)
    valid = counts > 0
    if not valid.any():
        return logits.sum() * 0.0
    per_image = (per_class * present).sum(1)[valid] / counts[valid]
    return per_image.mean()


def seg_loss(segmaps, targets, active=None, return_terms: bool = False):
    """Sum of WCE + Dice over the active ROIs.

    ``segmaps`` / ``targets`` are sequences (or dicts in ROI order) of
    ``(B, D, K, H, W)`` logits and ``(B, D, H, W)`` labels.
    """
    if isinstance(segmaps, dict):
        names = list(segmaps)
        segmaps = [segmaps[n] for n in names]
        targets = [targets[n] for n in names]
    if active is None:
        active = [True] * len(segmaps)
    if not any(active):
        raise ContractError("segmentation loss needs at least one active ROI")
    terms = []
    for logits, target, on in zip(segmaps, targets, active):
        if not on:
            continue
        nk = segmap_to_nk(logits)
        terms.append(weighted_ce(nk, target))
        terms.append(dice_loss(nk, target))
    total = torch.stack(terms).sum()
    return (total, terms) if return_terms else total


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels.long())


def total_loss(cls_loss, seg_loss_value, cl_loss, weights: LossWeights):
    if weights.seg < 0 or weights.cl < 0:
        raise ConfigError("loss weights must be non-negative")
    aux = weights.seg * seg_loss_value + weights.cl * cl_loss
    return aux if weights.stage == "pretrain" else cls_loss + aux
