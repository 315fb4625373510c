"""Raw little-endian tensor files with JSON sidecars, and the per-patient sample layout.

A patient directory holds, for each ROI, ``<roi>.f32`` (intensities) and
``<roi>.labels.u8`` (merged nuclei labels), each with a ``.json`` sidecar
``{"shape", "dtype", "axis_order", "nbytes"}``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError, StorageError
from .rois import ROI_ORDER, PatientSample, RoiVolume

SCHEMA_VERSION = 1
_DTYPES = {"float32": "<f4", "uint8": "u1"}


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_tensor(path: Path, array: np.ndarray, axis_order: str = "DHW") -> None:
    path = Path(path)
    dtype = str(array.dtype)
    if dtype not in _DTYPES:
        raise DataError(f"unsupported dtype {dtype} for {path}")
    data = np.ascontiguousarray(array, dtype=_DTYPES[dtype])
    data.tofile(path)
    meta = {"shape": list(array.shape), "dtype": dtype, "axis_order": axis_order, "nbytes": int(data.nbytes)}
    _sidecar(path).write_text(json.dumps(meta))


def read_tensor(path: Path) -> np.ndarray:
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
    except FileNotFoundError as exc:
        raise StorageError(f"missing sidecar {_sidecar(path)}") from exc
    except ValueError as exc:
        raise StorageError(f"corrupt sidecar {_sidecar(path)}: {exc}") from exc
    if not path.exists():
        raise StorageError(f"missing tensor file {path}")
    size = path.stat().st_size
    if size != meta.get("nbytes", size):
        raise StorageError(f"{path}: {size} bytes on disk, sidecar records {meta['nbytes']} (truncated or corrupt)")
    dtype = np.dtype(_DTYPES.get(meta.get("dtype"), "V"))
    if dtype.kind == "V":
        raise DataError(f"{path}: unknown dtype {meta.get('dtype')!r}")
    shape = tuple(meta["shape"])
    if int(np.prod(shape)) * dtype.itemsize != size:
        raise DataError(f"{path}: sidecar shape {shape} does not match {size} payload bytes")
    return np.fromfile(path, dtype=dtype).reshape(shape).astype(meta["dtype"])


def write_sample(sample: PatientSample, root: Path, split_tag: str = "train") -> dict:
    """Write one prepared patient under ``root/<patient_id>/`` and return its manifest entry."""
    root = Path(root)
    pdir = root / sample.patient_id
    pdir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in ROI_ORDER:
        roi = sample.rois[name]
        ipath, lpath = pdir / f"{name}.f32", pdir / f"{name}.labels.u8"
        write_tensor(ipath, roi.intensity.astype(np.float32))
        write_tensor(lpath, roi.labels.astype(np.uint8))
        files[name] = {"intensity": str(ipath.relative_to(root)), "labels": str(lpath.relative_to(root))}
    return {"patient_id": sample.patient_id, "label": int(sample.label), "files": files, "split_tag": split_tag}


def load_sample(entry: dict, root: Path) -> PatientSample:
    root = Path(root)
    rois = {}
    for name in ROI_ORDER:
        f = entry["files"][name]
        intensity = read_tensor(root / f["intensity"])
        labels = read_tensor(root / f["labels"])
        if intensity.shape != labels.shape:
            raise DataError(f"patient {entry['patient_id']} ROI {name}: intensity {intensity.shape} vs labels {labels.shape}")
        rois[name] = RoiVolume(intensity, labels)
    return PatientSample(entry["patient_id"], int(entry["label"]), rois)


def write_manifest(root: Path, manifest: dict) -> Path:
    ids = [p["patient_id"] for p in manifest["patients"]]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate patient ids in manifest")
    path = Path(root) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(root: Path) -> dict:
    path = Path(root) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise StorageError(f"missing manifest {path}") from exc
    except ValueError as exc:
        raise StorageError(f"corrupt manifest {path}: {exc}") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported schema_version {manifest.get('schema_version')!r}")
    return manifest


def load_dataset(root: Path, split_tag: str | None = None, workers: int = 1) -> list[PatientSample]:
    """Load every (or every ``split_tag``) patient listed in the manifest, in manifest order."""
    root = Path(root)
    entries = [e for e in read_manifest(root)["patients"] if split_tag is None or e["split_tag"] == split_tag]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda e: load_sample(e, root), entries))
    return [load_sample(e, root) for e in entries]
