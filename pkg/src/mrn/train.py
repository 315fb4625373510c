"""Two-stage training, evaluation, cross-validation, ensembling and ROI-masking ablation."""

from __future__ import annotations

import csv
import json
import logging
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, augment
from .errors import ConfigError, NumericalError
from .layers import attach_generator
from .losses import LossWeights, classification_loss, seg_loss, total_loss
from .metrics import MetricsReport, compute_metrics
from .model import MRN, MRNConfig
from .moco import MemoryBank, MocoConfig, batch_contrastive_loss, make_teacher, momentum_update
from .rois import ROI_ORDER, PatientSample, all_mask_patterns, apply_mask

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs_pretrain: int = 400
    epochs_finetune: int = 200
    batch_size: int = 4
    lr_backbone: float = 1e-5
    wd_backbone: float = 1e-1
    lr_heads: float = 1e-4
    wd_heads: float = 5e-2
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 1
    lambda_seg: float = 1.0
    lambda_cl: float = 1.0
    checkpoint_every: int = 0
    moco: MocoConfig = field(default_factory=MocoConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs_pretrain < 0 or self.epochs_finetune < 0 or self.batch_size < 1:
            raise ConfigError("epoch counts must be non-negative and batch_size positive")
        if min(self.lr_backbone, self.lr_heads) <= 0 or min(self.wd_backbone, self.wd_heads) < 0:
            raise ConfigError("learning rates must be positive and weight decays non-negative")

    @property
    def total_epochs(self) -> int:
        return self.epochs_pretrain + self.epochs_finetune


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("MRN_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def make_param_groups(model: MRN, config: TrainConfig | None = None, include_cls_head: bool = True) -> list[dict]:
    """Backbone (encoder, fusion) and head (DPT, classifier, projector) groups.

    Raises ConfigError if a trainable parameter belongs to neither group.
    """
    config = config or TrainConfig()
    backbone = [p for m in (model.res.encoder, model.res.fusion) for p in m.parameters() if p.requires_grad]
    aux = [p for m in (model.res.dpt, model.proj_head) for p in m.parameters() if p.requires_grad]
    cls = [p for p in model.cls_head.parameters() if p.requires_grad]
    seen = {id(p) for p in backbone + aux + cls}
    orphans = [n for n, p in model.named_parameters() if p.requires_grad and id(p) not in seen]
    if orphans:
        raise ConfigError(f"parameters outside every optimizer group: {orphans}")
    if len(seen) != len(backbone) + len(aux) + len(cls):
        raise ConfigError("a parameter is assigned to more than one optimizer group")
    groups = [
        {"name": "backbone", "params": backbone, "lr": config.lr_backbone, "weight_decay": config.wd_backbone},
        {"name": "heads", "params": aux, "lr": config.lr_heads, "weight_decay": config.wd_heads},
    ]
    if include_cls_head:
        groups.append({"name": "cls_head", "params": cls, "lr": config.lr_heads, "weight_decay": config.wd_heads})
    return groups


def collate(samples: list[PatientSample], dtype=torch.float32):
    """Stack samples into ``(rois, targets, labels)`` with ROI tensors of shape (B, D, H, W)."""
    rois = {n: torch.from_numpy(np.stack([s.rois[n].intensity for s in samples])).to(dtype) for n in ROI_ORDER}
    targets = {n: torch.from_numpy(np.stack([s.rois[n].labels for s in samples]).astype(np.int64)) for n in ROI_ORDER}
    labels = torch.tensor([s.label for s in samples], dtype=torch.long)
    return rois, targets, labels


def sample_rng(seed: int, epoch: int, patient_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, zlib.crc32(patient_id.encode())]))


@dataclass
class TrainResult:
    model: MRN
    teacher: MRN
    bank: MemoryBank
    history: list[dict]
    checkpoints: list[Path]


class Trainer:
    """Owns the student, the momentum teacher, the memory bank and the optimizer."""

    def __init__(self, model_config: MRNConfig, config: TrainConfig, run_dir: Path | None = None, hooks=None):
        self.model_config = model_config
        self.config = config
        self.run_dir = Path(run_dir) if run_dir is not None else None
        torch.manual_seed(config.seed)
        self.model = MRN(model_config)
        self.drop_gen = torch.Generator().manual_seed(config.seed)
        attach_generator(self.model, self.drop_gen)
        self.teacher = make_teacher(self.model)
        self.bank = MemoryBank(config.moco.bank_size, model_config.proj_dim)
        self.optimizer = torch.optim.AdamW(make_param_groups(self.model, config, include_cls_head=False),
                                           betas=config.betas)
        self.stage = "pretrain"
        self.step = 0
        self.history: list[dict] = []
        self.checkpoints: list[Path] = []
        self.hooks = hooks or {}

    # ------------------------------------------------------------------ stages
    def enter_finetune(self) -> None:
        """Add the classification head to the optimizer; existing optimizer state carries over."""
        if self.stage == "finetune":
            return
        self.optimizer.add_param_group({"name": "cls_head", "params": list(self.model.cls_head.parameters()),
                                        "lr": self.config.lr_heads, "weight_decay": self.config.wd_heads})
        self.stage = "finetune"

    def _augment(self, batch: list[PatientSample], epoch: int) -> list[PatientSample]:
        cfg = self.config.augment

        def one(s):
            return augment(s, cfg, sample_rng(self.config.seed, epoch, s.patient_id))

        workers = num_workers()
        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(workers) as pool:
                return list(pool.map(one, batch))
        return [one(s) for s in batch]

    def train_step(self, batch: list[PatientSample], epoch: int) -> dict:
        self.model.train()
        rois, targets, labels = collate(self._augment(batch, epoch))
        out = self.model(rois, with_seg=True)
        l_seg = seg_loss(out.segmaps, targets)
        z = self.model.project(out.r)
        with torch.no_grad():
            t_r, _ = self.teacher.representation(rois, with_seg=False)
            keys = self.teacher.project(t_r)
        bank_keys = [self.bank.entries(c) for c in range(self.bank.num_classes)]
        bank_labels = [torch.full((k.shape[0],), c, dtype=torch.long) for c, k in enumerate(bank_keys)]
        all_keys = torch.cat(bank_keys + [keys.to(self.bank.buffers.dtype)])
        all_labels = torch.cat(bank_labels + [labels])
        l_cl, _ = batch_contrastive_loss(z, labels, all_keys.to(z.dtype), all_labels, self.config.moco.tau)
        l_cls = classification_loss(out.class_logits, labels)
        weights = LossWeights(self.config.lambda_seg, self.config.lambda_cl, self.stage)
        loss = total_loss(l_cls, l_seg, l_cl, weights)
        terms = {k: float(v.detach()) for k, v in
                 (("loss", loss), ("loss_cls", l_cls), ("loss_seg", l_seg), ("loss_cl", l_cl))}
        if not all(np.isfinite(v) for v in terms.values()):
            self._dump_nonfinite(epoch, batch, terms)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if "after_backward" in self.hooks:
            self.hooks["after_backward"](self)
        self.optimizer.step()
        momentum_update(self.teacher, self.model, self.config.moco.momentum)
        self.bank.enqueue_batch(keys, labels)
        self.step += 1
        return terms

    def _dump_nonfinite(self, epoch, batch, terms):
        dump = {"step": self.step, "epoch": epoch, "stage": self.stage,
                "batch_ids": [s.patient_id for s in batch], "terms": terms}
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "nonfinite_dump.json").write_text(json.dumps(dump, indent=2))
        raise NumericalError(f"non-finite loss at step {self.step}: {dump}")

    # ------------------------------------------------------------------ loop
    def run(self, train_set: list[PatientSample], val_set: list[PatientSample] | None = None,
            eval_every: int = 0) -> TrainResult:
        cfg = self.config
        if not train_set:
            raise ConfigError("empty training set")
        log_path = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.run_dir / "train_log.jsonl"
            log_path.write_text("")
        if cfg.epochs_pretrain == 0:
            self.enter_finetune()
        for epoch in range(1, cfg.total_epochs + 1):
            if epoch == cfg.epochs_pretrain + 1:
                self.enter_finetune()
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
            sums = {"loss_cls": 0.0, "loss_seg": 0.0, "loss_cl": 0.0}
            n_steps = 0
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
                terms = self.train_step(batch, epoch)
                for k in sums:
                    sums[k] += terms[k]
                n_steps += 1
            record = {"epoch": epoch, "stage": self.stage, **{k: v / n_steps for k, v in sums.items()},
                      "lr": {g["name"]: g["lr"] for g in self.optimizer.param_groups}}
            if val_set and eval_every and epoch % eval_every == 0:
                record["val_metrics"] = evaluate(self.model, val_set).to_dict()
            self.history.append(record)
            if log_path is not None:
                with log_path.open("a") as fh:
                    fh.write(json.dumps(record) + "\n")
            log.info("epoch %d %s cls=%.4f seg=%.4f cl=%.4f", epoch, self.stage,
                     record["loss_cls"], record["loss_seg"], record["loss_cl"])
            stage_end = epoch in (cfg.epochs_pretrain, cfg.total_epochs)
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0 and not stage_end:
                self._checkpoint(f"{self.stage}_epoch{epoch:04d}.zip", epoch)
            if stage_end:
                self._checkpoint(f"{self.stage}_final.zip", epoch)
        return TrainResult(self.model, self.teacher, self.bank, self.history, self.checkpoints)

    def _checkpoint(self, name: str, epoch: int) -> None:
        if self.run_dir is None:
            return
        from .checkpoint import save_checkpoint
        from .config import config_hash, to_dict

        path = save_checkpoint(self.run_dir / name, self.model, self.teacher, self.bank, epoch=epoch,
                               stage=self.stage, step=self.step, config_hash=config_hash(self.config),
                               train_config=to_dict(self.config))
        self.checkpoints.append(path)


def train(model_config: MRNConfig, config: TrainConfig, train_set, run_dir=None, val_set=None,
          eval_every: int = 0) -> TrainResult:
    return Trainer(model_config, config, run_dir).run(train_set, val_set, eval_every)


# ---------------------------------------------------------------------- evaluation
@torch.no_grad()
def predict_proba(model: MRN, samples: list[PatientSample], batch_size: int = 8) -> np.ndarray:
    """Softmax class probabilities ``(n, 2)`` in eval mode; segmentation is skipped."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(samples), batch_size):
        rois, _, _ = collate(samples[start:start + batch_size], dtype)
        out.append(F.softmax(model(rois, with_seg=False).class_logits, dim=-1).double().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 2))


def evaluate(model: MRN, samples: list[PatientSample]) -> MetricsReport:
    probs = predict_proba(model, samples)
    return compute_metrics(probs[:, 1], [s.label for s in samples])


@torch.no_grad()
def segmentation_dice(model: MRN, samples: list[PatientSample], batch_size: int = 4) -> float:
    """Mean hard-argmax Dice over the foreground classes present in each ROI volume's target."""
    was_training = model.training
    model.eval()
    scores = []
    for start in range(0, len(samples), batch_size):
        rois, targets, _ = collate(samples[start:start + batch_size])
        out = model(rois, with_seg=True)
        for name in ROI_ORDER:
            pred = out.segmaps[name].argmax(dim=2)
            tgt = targets[name]
            for p, t in zip(pred, tgt):
                per_class = []
                for k in t.unique().tolist():
                    if k == 0:
                        continue
                    a, b = p == k, t == k
                    per_class.append(2.0 * float((a & b).sum()) / float(a.sum() + b.sum()))
                if per_class:
                    scores.append(float(np.mean(per_class)))
    model.train(was_training)
    return float(np.mean(scores)) if scores else float("nan")


def kfold(samples: list, k: int, seed: int = 1) -> list[tuple[list, list]]:
    """Stratified k-fold splits ``[(train, val), ...]``; works on any items with a ``label``."""
    if k < 2:
        raise ConfigError("k must be at least 2")
    labels = np.array([s.label for s in samples])
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < k:
            raise ConfigError(f"class {cls} has {len(idx)} members, fewer than k={k}")
        idx = rng.permutation(idx)
        for j, i in enumerate(idx):
            folds[(j + offset) % k].append(int(i))
        offset = (offset + len(idx)) % k
    splits = []
    for f in range(k):
        val = sorted(folds[f])
        held = set(val)
        splits.append(([samples[i] for i in range(len(samples)) if i not in held], [samples[i] for i in val]))
    return splits


def ensemble_predict(models: list[MRN], samples: list[PatientSample]) -> np.ndarray:
    """Arithmetic mean of per-model softmax probabilities."""
    if not models:
        raise ConfigError("ensemble needs at least one model")
    return np.mean([predict_proba(m, samples) for m in models], axis=0)


ABLATION_COLUMNS = ("NM", "QSM1", "QSM2", "QSM3", "accuracy", "roc_auc", "f1")


def masking_ablation(model: MRN, samples: list[PatientSample], patterns=None) -> list[dict]:
    """Baseline row followed by one row per mask pattern (True = ROI zeroed)."""
    patterns = all_mask_patterns() if patterns is None else patterns
    rows = []

    def row(pattern, report):
        r = {n: ("masked" if m else "kept") for n, m in zip(ROI_ORDER, pattern)}
        r.update(accuracy=report.accuracy, roc_auc=report.roc_auc, f1=report.f1)
        return r

    rows.append(row((False,) * 4, evaluate(model, samples)))
    for pattern in patterns:
        rows.append(row(tuple(pattern), evaluate(model, [apply_mask(s, pattern) for s in samples])))
    return rows


def write_ablation_csv(rows: list[dict], path: Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r[k] is None else r[k]) for k in ABLATION_COLUMNS})
    return path
