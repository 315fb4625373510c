"""Supervised momentum contrast over patient representations.

The student's projection is the anchor; positives and negatives are teacher
projections, drawn from the current batch and from per-class FIFO memory
banks. The teacher is an exponential moving average of the student.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ContractError

log = logging.getLogger(__name__)


@dataclass
class MocoConfig:
    tau: float = 0.1
    bank_size: int = 1024
    momentum: float = 0.999

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError("temperature must be positive")
        if self.tau < 0.1:
            log.warning("temperature %.3g below 0.1 has been reported to train unstably across data splits", self.tau)
        if self.bank_size < 1 or not 0.0 <= self.momentum <= 1.0:
            raise ContractError("bank_size must be positive and momentum in [0, 1]")


def contrastive_loss(anchor: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """Supervised contrastive loss of one anchor ``(c,)`` against ``(P, c)`` positives and ``(N, c)`` negatives.

    Each positive term is ``logaddexp(a_p, logsumexp(a_n)) - a_p`` with
    ``a = z . k / tau``, i.e. the negative log of the positive's softmax share
    against all negatives; terms are averaged over positives.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if positives.ndim != 2 or positives.shape[0] == 0:
        raise ContractError("contrastive loss needs at least one positive")
    pos = positives @ anchor / tau
    if negatives.numel() == 0:
        return torch.zeros((), dtype=anchor.dtype) + (pos - pos).mean()
    neg_lse = torch.logsumexp(negatives @ anchor / tau, dim=0)
    return (torch.logaddexp(pos, neg_lse) - pos).mean()


def batch_contrastive_loss(anchors, anchor_labels, keys, key_labels, tau: float):
    """Vectorised loss over a batch of anchors sharing one key set.

    Keys whose label equals the anchor's are positives, the rest negatives.
    Anchors with no positive are skipped. Returns ``(mean loss, n_used)``.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    logits = anchors @ keys.T / tau
    pos = anchor_labels[:, None] == key_labels[None, :]
    neg = ~pos
    used = pos.any(1)
    n_used = int(used.sum())
    if n_used == 0:
        return anchors.sum() * 0.0, 0
    has_neg = neg.any(1)
    masked = logits.masked_fill(~neg, float("-inf"))
    masked = torch.where(has_neg[:, None], masked, torch.zeros_like(logits))
    neg_lse = torch.logsumexp(masked, dim=1)
    neg_lse = torch.where(has_neg, neg_lse, torch.full_like(neg_lse, float("-inf")))
    terms = torch.logaddexp(logits, neg_lse[:, None]) - logits
    terms = torch.where(pos, terms, torch.zeros_like(terms))
    per_anchor = terms.sum(1) / pos.sum(1).clamp(min=1)
    return per_anchor[used].mean(), n_used


class MemoryBank:
    """One fixed-capacity FIFO ring of unit-norm projections per class."""

    def __init__(self, capacity: int, dim: int, num_classes: int = 2, dtype=torch.float32):
        if capacity < 1:
            raise ContractError("bank capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.num_classes = num_classes
        self.buffers = torch.zeros(num_classes, capacity, dim, dtype=dtype)
        self.cursor = [0] * num_classes
        self.size = [0] * num_classes

    def enqueue(self, z: torch.Tensor, label: int) -> None:
        label = int(label)
        if not 0 <= label < self.num_classes:
            raise ContractError(f"unknown class label {label}")
        if z.shape != (self.dim,):
            raise ContractError(f"projection of shape {tuple(z.shape)}, bank expects ({self.dim},)")
        self.buffers[label, self.cursor[label]] = z.detach().to(self.buffers.dtype)
        self.cursor[label] = (self.cursor[label] + 1) % self.capacity
        self.size[label] = min(self.size[label] + 1, self.capacity)

    def enqueue_batch(self, z: torch.Tensor, labels) -> None:
        for zi, yi in zip(z, labels):
            self.enqueue(zi, int(yi))

    def entries(self, label: int) -> torch.Tensor:
        """Cached projections of ``label``, oldest first."""
        n = self.size[label]
        if n < self.capacity:
            return self.buffers[label, :n].clone()
        c = self.cursor[label]
        return torch.cat([self.buffers[label, c:], self.buffers[label, :c]]).clone()

    def __len__(self):
        return sum(self.size)

    def state_dict(self) -> dict:
        return {"buffers": self.buffers.clone(), "cursor": list(self.cursor), "size": list(self.size)}

    def load_state_dict(self, state: dict) -> None:
        buffers = torch.as_tensor(state["buffers"])
        if buffers.shape != self.buffers.shape:
            raise ContractError(f"bank state of shape {tuple(buffers.shape)} for bank {tuple(self.buffers.shape)}")
        self.buffers = buffers.to(self.buffers.dtype).clone()
        self.cursor = [int(v) for v in state["cursor"]]
        self.size = [int(v) for v in state["size"]]


def bank_gather(bank: MemoryBank, anchor_label: int, batch_keys=None, batch_labels=None):
    """Positives and negatives for an anchor: cached entries plus in-batch teacher keys.

    The anchor's own teacher key (part of ``batch_keys``) counts as a positive.
    Returns ``None`` when no positive exists anywhere.
    """
    other = 1 - int(anchor_label)
    pos = [bank.entries(anchor_label)]
    neg = [bank.entries(other)]
    if batch_keys is not None:
        labels = torch.as_tensor(batch_labels)
        pos.append(batch_keys[labels == anchor_label].to(bank.buffers.dtype))
        neg.append(batch_keys[labels != anchor_label].to(bank.buffers.dtype))
    positives, negatives = torch.cat(pos), torch.cat(neg)
    if positives.shape[0] == 0:
        log.info("anchor of class %d has no positives; skipped", anchor_label)
        return None
    return positives, negatives


def make_teacher(student: nn.Module) -> nn.Module:
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher.eval()


@torch.no_grad()
def momentum_update(teacher: nn.Module, student: nn.Module, m: float) -> None:
    """``teacher <- m * teacher + (1 - m) * student`` for every parameter."""
    if not 0.0 <= m <= 1.0:
        raise ContractError(f"momentum must be in [0, 1], got {m}")
    t_params = list(teacher.parameters())
    s_params = list(student.parameters())
    if len(t_params) != len(s_params):
        raise ContractError("teacher and student have different parameter counts")
    for pt, ps in zip(t_params, s_params):
        if pt.shape != ps.shape:
            raise ContractError(f"parameter shape mismatch {tuple(pt.shape)} vs {tuple(ps.shape)}")
        if m == 1.0:
            continue
        if m == 0.0:
            pt.copy_(ps)
        else:
            pt.mul_(m).add_(ps.detach(), alpha=1.0 - m)
