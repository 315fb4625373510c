"""Finite-difference verification of analytic gradients in double precision.

Each suite builds a small float64 component with random non-degenerate
parameters, reduces its output to a scalar through a fixed random readout and
compares autograd gradients against central differences on a random subset
of coordinates of every input and parameter tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dpt import DptConfig, DptHead
from .fusion import FusionConfig, TokenField, VolumeFusion
from .losses import dice_loss, weighted_ce
from .model import ClassificationHead, ProjectionHead
from .moco import batch_contrastive_loss, contrastive_loss
from .slice_encoder import EncoderConfig, SliceEncoder

SUITES = ("encoder", "ffa", "sfa", "dpt", "losses", "contrastive")
TOLERANCE = 1e-4
# Below this gradient norm a tensor is compared in absolute terms.
NORM_FLOOR = 1e-8


@dataclass
class ToyDims:
    channels: int = 8
    depth: int = 3
    size: int = 28
    patch: int = 7
    ffa: int = 2
    sfa: int = 1
    classes: int = 2
    proj: int = 8
    heads: int = 2


@dataclass
class SuiteResult:
    name: str
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.worst <= tol


def randomize(module: nn.Module, gen: torch.Generator, scale: float = 0.3) -> nn.Module:
    with torch.no_grad():
        for name, p in module.named_parameters():
            noise = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            if isinstance(p, nn.Parameter) and name.endswith("weight") and p.ndim == 1:
                p.copy_(1.0 + 0.1 * noise)  # norm gains
            else:
                p.copy_(scale * noise)
    return module


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    diff = float((analytic - numeric).norm())
    denom = max(float(analytic.norm()), float(numeric.norm()))
    return diff if denom < NORM_FLOOR else diff / denom


def check(fn, tensors: dict[str, torch.Tensor], gen: torch.Generator, coords: int = 6, eps: float = 1e-6,
          corrupt: bool = False) -> dict[str, float]:
    """Compare d fn / d t for every named leaf tensor against central differences."""
    for t in tensors.values():
        t.grad = None
        t.requires_grad_(True)
    fn().backward()
    errors = {}
    with torch.no_grad():
        for name, t in tensors.items():
            grad = t.grad if t.grad is not None else torch.zeros_like(t)
            flat = t.view(-1)
            n = min(coords, flat.numel())
            idx = torch.randperm(flat.numel(), generator=gen)[:n]
            analytic = grad.reshape(-1)[idx].clone()
            if corrupt:
                analytic = analytic * 1.01 + 1e-3
            numeric = torch.empty_like(analytic)
            for j, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * eps)
            errors[name] = relative_error(analytic, numeric)
    return errors


def _readout(shape, gen):
    return torch.randn(shape, generator=gen, dtype=torch.float64)


def _params(prefix: str, module: nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{n}": p for n, p in module.named_parameters()}


def suite_encoder(dims: ToyDims, gen, corrupt=False) -> SuiteResult:
    cfg = EncoderConfig.toy(channel_dim=dims.channels, depth=2, num_heads=dims.heads, patch_size=dims.patch,
                            max_grid=(dims.size // dims.patch,) * 2)
    enc = randomize(SliceEncoder(cfg).double(), gen)
    x = torch.randn(dims.depth, dims.size, dims.size, generator=gen, dtype=torch.float64)
    grid = dims.size // dims.patch
    w_p = _readout((dims.depth, grid * grid, dims.channels), gen)
    w_c = _readout((dims.depth, dims.channels), gen)

    def fn():
        patch, cls, _ = enc(x)
        return (patch * w_p).sum() + (cls * w_c).sum()

    return SuiteResult("encoder", check(fn, {"input": x, **_params("encoder", enc)}, gen, corrupt=corrupt))


def _fusion(dims: ToyDims, gen) -> VolumeFusion:
    cfg = FusionConfig(num_ffa_layers=dims.ffa, num_sfa_layers=dims.sfa, num_heads=dims.heads, max_depth=8)
    return randomize(VolumeFusion(dims.channels, cfg).double(), gen)


def suite_ffa(dims: ToyDims, gen, corrupt=False) -> SuiteResult:
    fusion = _fusion(dims, gen)
    L = (dims.size // dims.patch) ** 2
    patch = torch.randn(1, dims.depth, L, dims.channels, generator=gen, dtype=torch.float64)
    slice_tok = torch.randn(1, dims.depth, dims.channels, generator=gen, dtype=torch.float64)
    w_out = _readout(patch.shape, gen)
    w_s = _readout(slice_tok.shape, gen)
    w_tr = [_readout(patch.shape, gen) for _ in range(2 * dims.ffa)]

    def fn():
        tokens, trace = fusion.ffa_stack(fusion.add_slice_positions(TokenField(patch, slice_tok)))
        snaps = trace.global_patches + trace.local_patches
        return ((tokens.patch_tokens * w_out).sum() + (tokens.slice_tokens * w_s).sum()
                + sum((s * w).sum() for s, w in zip(snaps, w_tr)))

    params = {k: v for k, v in _params("fusion", fusion).items() if ".sfa." not in k and "roi_token" not in k}
    return SuiteResult("ffa", check(fn, {"patch": patch, "slice": slice_tok, **params}, gen, corrupt=corrupt))


def suite_sfa(dims: ToyDims, gen, corrupt=False) -> SuiteResult:
    fusion = _fusion(dims, gen)
    slice_tok = torch.randn(2, dims.depth, dims.channels, generator=gen, dtype=torch.float64)
    w = _readout((2, dims.channels), gen)

    def fn():
        return (fusion.sfa_stack(slice_tok) * w).sum()

    params = {k: v for k, v in _params("fusion", fusion).items() if ".sfa." in k or "roi_token" in k}
    return SuiteResult("sfa", check(fn, {"slice": slice_tok, **params}, gen, corrupt=corrupt))


def suite_dpt(dims: ToyDims, gen, corrupt=False) -> SuiteResult:
    cfg = DptConfig(projection_channels=(4, 8, 8, 8), fusion_channels=8, num_classes=dims.classes)
    head = randomize(DptHead(dims.channels, cfg).double(), gen)
    g = dims.size // dims.patch
    feats = [torch.randn(1, dims.depth, g * g, dims.channels, generator=gen, dtype=torch.float64) for _ in range(4)]
    w = _readout((1, dims.depth, dims.classes, dims.size, dims.size), gen)

    def fn():
        return (head(feats, (g, g), (dims.size, dims.size)) * w).sum()

    tensors = {f"feature{i}": f for i, f in enumerate(feats)}
    return SuiteResult("dpt", check(fn, {**tensors, **_params("dpt", head)}, gen, corrupt=corrupt))


def suite_losses(dims: ToyDims, gen, corrupt=False) -> SuiteResult:
    result = SuiteResult("losses")
    k = max(dims.classes, 3)
    logits = torch.randn(2, k, dims.depth, 6, 6, generator=gen, dtype=torch.float64)
    target = torch.randint(0, k, (2, dims.depth, 6, 6), generator=gen)
    for name, loss in (("wce", weighted_ce), ("dice", dice_loss)):
        errs = check(lambda: loss(logits, target), {"logits": logits}, gen, coords=12, corrupt=corrupt)
        result.errors.update({f"{name}.{n}": e for n, e in errs.items()})
    head = randomize(ClassificationHead(4 * dims.channels, dropout=0.0).double(), gen)
    r = torch.randn(3, 4 * dims.channels, generator=gen, dtype=torch.float64)
    y = torch.tensor([0, 1, 1])
    errs = check(lambda: F.cross_entropy(head(r), y), {"r": r, **_params("cls_head", head)}, gen, corrupt=corrupt)
    result.errors.update({f"classification.{n}": e for n, e in errs.items()})
    return result


def suite_contrastive(dims: ToyDims, gen, corrupt=False) -> SuiteResult:
    result = SuiteResult("contrastive")
    c = dims.proj
    anchor = F.normalize(torch.randn(c, generator=gen, dtype=torch.float64), dim=0)
    pos = F.normalize(torch.randn(3, c, generator=gen, dtype=torch.float64), dim=1)
    neg = F.normalize(torch.randn(5, c, generator=gen, dtype=torch.float64), dim=1)
    errs = check(lambda: contrastive_loss(anchor, pos, neg, 0.1), {"anchor": anchor}, gen, coords=c,
                 corrupt=corrupt)
    result.errors.update({f"single.{n}": e for n, e in errs.items()})
    proj = randomize(ProjectionHead(4 * dims.channels, c).double(), gen)
    r = torch.randn(4, 4 * dims.channels, generator=gen, dtype=torch.float64)
    labels = torch.tensor([0, 1, 1, 0])
    keys = F.normalize(torch.randn(6, c, generator=gen, dtype=torch.float64), dim=1)
    key_labels = torch.tensor([0, 0, 1, 1, 0, 1])

    def fn():
        return batch_contrastive_loss(proj(r), labels, keys, key_labels, 0.1)[0]

    errs = check(fn, {"r": r, **_params("proj_head", proj)}, gen, corrupt=corrupt)
    result.errors.update({f"batch.{n}": e for n, e in errs.items()})
    return result


_SUITE_FNS = {
    "encoder": suite_encoder,
    "ffa": suite_ffa,
    "sfa": suite_sfa,
    "dpt": suite_dpt,
    "losses": suite_losses,
    "contrastive": suite_contrastive,
}


def run_gradcheck(dims: ToyDims | None = None, seed: int = 0, corrupt: tuple[str, ...] = (),
                  suites=SUITES) -> list[SuiteResult]:
    """Run the named suites; names in ``corrupt`` get deliberately perturbed analytic gradients."""
    dims = dims or ToyDims()
    results = []
    for name in suites:
        gen = torch.Generator().manual_seed(seed * 1000 + SUITES.index(name))
        results.append(_SUITE_FNS[name](dims, gen, corrupt=name in corrupt))
    return results
