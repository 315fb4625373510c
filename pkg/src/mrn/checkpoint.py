"""Checkpoint archives.

A checkpoint is a zip file with ``manifest.json`` (config hash, epoch, stage,
model config and tensor index) and one raw little-endian float32 payload per
named tensor. Student parameters live under ``model/``, the momentum teacher
under ``teacher/`` and the memory bank under ``bank/``.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import StorageError
from .model import MRN, MRNConfig
from .moco import MemoryBank


def _put(zf: zipfile.ZipFile, index: dict, name: str, tensor: torch.Tensor) -> None:
    arr = tensor.detach().cpu().numpy().astype("<f4")
    zf.writestr(name, arr.tobytes())
    index[name] = list(arr.shape)


def _get(zf: zipfile.ZipFile, index: dict, name: str) -> torch.Tensor:
    try:
        raw = zf.read(name)
    except KeyError as exc:
        raise StorageError(f"checkpoint lacks tensor {name}") from exc
    arr = np.frombuffer(raw, dtype="<f4").reshape(index[name]).copy()
    return torch.from_numpy(arr)


def save_checkpoint(path: Path, model: MRN, teacher: MRN | None = None, bank: MemoryBank | None = None, **meta) -> Path:
    from .config import to_dict

    path = Path(path)
    index: dict = {}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, t in model.state_dict().items():
            _put(zf, index, f"model/{name}", t)
        if teacher is not None:
            for name, t in teacher.state_dict().items():
                _put(zf, index, f"teacher/{name}", t)
        bank_meta = None
        if bank is not None:
            _put(zf, index, "bank/buffers", bank.buffers)
            bank_meta = {"capacity": bank.capacity, "dim": bank.dim, "cursor": bank.cursor, "size": bank.size}
        manifest = {"model_config": to_dict(model.config), "tensors": index, "bank": bank_meta, **meta}
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    # Fixed zip timestamps are not needed: entries carry no mtime-dependent payload we compare.
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: Path, dtype=torch.float32):
    """Return ``(model, teacher or None, bank or None, manifest)``."""
    from .config import build

    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise StorageError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        manifest = json.loads(zf.read("manifest.json"))
        index = manifest["tensors"]
        config = build(MRNConfig, manifest["model_config"])
        model = MRN(config).to(dtype)
        model.load_state_dict({k[len("model/"):]: _get(zf, index, k) for k in index if k.startswith("model/")})
        teacher = None
        if any(k.startswith("teacher/") for k in index):
            teacher = MRN(config).to(dtype)
            teacher.load_state_dict({k[len("teacher/"):]: _get(zf, index, k) for k in index if k.startswith("teacher/")})
            for p in teacher.parameters():
                p.requires_grad_(False)
            teacher.eval()
        bank = None
        if manifest.get("bank"):
            b = manifest["bank"]
            bank = MemoryBank(b["capacity"], b["dim"])
            bank.load_state_dict({"buffers": _get(zf, index, "bank/buffers"), "cursor": b["cursor"], "size": b["size"]})
    model.eval()
    return model, teacher, bank, manifest
