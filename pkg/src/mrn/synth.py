"""Synthetic paired NM / QSM patients with planted ellipsoidal nuclei.

Each patient gets an NM volume and a QSM volume with left/right nucleus
pairs, a raw (side-specific) label mask per modality and an HC/PD label.
PD patients have the NM substantia nigra darkened by ``signal_strength`` and
the QSM midbrain signal nuclei brightened by ``signal_strength *
qsm_signal_ratio``; nothing else differs between classes.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .rois import LabelScheme, PatientSample, RoiSpec, prepare_patient, toy_roi_specs
from .storage import SCHEMA_VERSION, write_manifest, write_sample


def default_geometry() -> dict:
    """Nucleus layout in voxel units: centre (z, y), lateral offset from the midline, radii (z, y, x)."""
    return {
        "NM": [
            {"name": "SN", "center": [4.0, 12.0], "offset": 4.0, "radii": [1.5, 2.0, 2.5], "intensity": 1.0},
        ],
        "QSM": [
            {"name": "putamen", "center": [14.0, 24.0], "offset": 10.0, "radii": [2.0, 5.0, 3.0], "intensity": 0.45},
            {"name": "thalamus", "center": [14.0, 34.0], "offset": 4.5, "radii": [2.0, 4.0, 3.0], "intensity": 0.25},
            {"name": "SN", "center": [8.0, 38.0], "offset": 7.0, "radii": [1.5, 2.5, 3.5], "intensity": 0.8},
            {"name": "RN", "center": [8.0, 32.0], "offset": 3.0, "radii": [1.5, 2.5, 2.5], "intensity": 0.7},
            {"name": "dentate", "center": [3.0, 50.0], "offset": 7.0, "radii": [1.5, 3.0, 3.0], "intensity": 0.6},
        ],
    }


def default_unlabeled() -> dict:
    """Unlabelled structures: a dark midline cistern next to the NM nigra."""
    return {"NM": [{"center": [4.0, 9.0, 16.0], "radii": [2.0, 1.5, 2.0], "intensity": 0.0}], "QSM": []}


@dataclass
class SynthConfig:
    num_patients: int = 200
    class_balance: float = 0.5
    holdout_fraction: float = 0.2
    nm_dims: tuple[int, int, int] = (8, 24, 32)
    qsm_dims: tuple[int, int, int] = (20, 64, 64)
    geometry: dict = field(default_factory=default_geometry)
    unlabeled: dict = field(default_factory=default_unlabeled)
    tissue_level: dict = field(default_factory=lambda: {"NM": 0.35, "QSM": 0.05})
    signal_strength: float = 0.4
    qsm_signal_ratio: float = 0.25
    qsm_signal_nuclei: tuple[str, ...] = ("SN",)
    contrast_jitter: float = 0.05
    position_jitter: float = 1.0
    radius_jitter: float = 0.1
    blur_sigma: float = 0.6
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.nm_dims = tuple(self.nm_dims)
        self.qsm_dims = tuple(self.qsm_dims)
        self.qsm_signal_nuclei = tuple(self.qsm_signal_nuclei)
        if self.num_patients < 1:
            raise ConfigError("num_patients must be positive")
        if not 0.0 <= self.class_balance <= 1.0 or not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("class_balance must be in [0, 1] and holdout_fraction in [0, 1)")
        if self.signal_strength < 0 or self.noise_sigma < 0:
            raise ConfigError("signal_strength and noise_sigma must be non-negative")
        dims = {"NM": self.nm_dims, "QSM": self.qsm_dims}
        for mod, nuclei in self.geometry.items():
            if mod not in dims:
                raise ConfigError(f"unknown modality {mod!r} in geometry")
            d, h, w = dims[mod]
            for nuc in nuclei:
                (cz, cy), off, (rz, ry, rx) = nuc["center"], nuc["offset"], nuc["radii"]
                grow = 1.0 + self.radius_jitter
                pj = self.position_jitter
                cx = (w - 1) / 2.0
                lo = (cz - rz * grow, cy - ry * grow - pj, cx - off - rx * grow - pj)
                hi = (cz + rz * grow, cy + ry * grow + pj, cx + off + rx * grow + pj)
                if min(lo) < 0 or hi[0] > d - 1 or hi[1] > h - 1 or hi[2] > w - 1:
                    raise ConfigError(f"{mod} nucleus {nuc['name']} exceeds volume bounds {dims[mod]}")

    @property
    def scheme(self) -> LabelScheme:
        return LabelScheme({mod: tuple(n["name"] for n in nuclei) for mod, nuclei in self.geometry.items()})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nm_dims"], d["qsm_dims"] = list(self.nm_dims), list(self.qsm_dims)
        d["qsm_signal_nuclei"] = list(self.qsm_signal_nuclei)
        return d


def patient_seed(global_seed: int, patient_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(global_seed), zlib.crc32(patient_id.encode())])


def assign_labels(config: SynthConfig) -> list[tuple[str, int, str]]:
    """(patient_id, label, split_tag) for every patient; exact class counts, stratified hold-out."""
    n = config.num_patients
    n_pd = int(round(n * config.class_balance))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7919]))
    labels = np.array([1] * n_pd + [0] * (n - n_pd))
    rng.shuffle(labels)
    split = np.array(["train"] * n, dtype=object)
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        k = int(round(len(idx) * config.holdout_fraction))
        split[rng.permutation(idx)[:k]] = "test"
    return [(f"P{i:04d}", int(labels[i]), str(split[i])) for i in range(n)]


def _ellipsoid(shape, center, radii) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    (cz, cy, cx), (rz, ry, rx) = center, radii
    return ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def generate_patient(config: SynthConfig, patient_id: str, label: int):
    """Raw volumes and side-specific label masks, keyed by modality ("NM", "QSM")."""
    rng = np.random.default_rng(patient_seed(config.seed, patient_id))
    scheme = config.scheme
    dims = {"NM": config.nm_dims, "QSM": config.qsm_dims}
    volumes, masks = {}, {}
    for mod in ("NM", "QSM"):
        shape = dims[mod]
        vol = np.full(shape, config.tissue_level[mod], dtype=np.float64)
        mask = np.zeros(shape, dtype=np.uint8)
        cx = (shape[2] - 1) / 2.0
        for extra in config.unlabeled.get(mod, []):
            vol[_ellipsoid(shape, extra["center"], extra["radii"])] = extra["intensity"]
        for nuc in config.geometry[mod]:
            level = nuc["intensity"] + rng.uniform(-config.contrast_jitter, config.contrast_jitter)
            if label == 1:
                if mod == "NM" and nuc["name"] == "SN":
                    level -= config.signal_strength
                elif mod == "QSM" and nuc["name"] in config.qsm_signal_nuclei:
                    level += config.signal_strength * config.qsm_signal_ratio
            left_id, right_id = scheme.raw_ids(mod, nuc["name"])
            for side, lab in ((-1, left_id), (1, right_id)):
                jitter = rng.uniform(-config.position_jitter, config.position_jitter, size=2)
                center = (nuc["center"][0], nuc["center"][1] + jitter[0], cx + side * nuc["offset"] + jitter[1])
                radii = np.asarray(nuc["radii"]) * rng.uniform(1 - config.radius_jitter, 1 + config.radius_jitter)
                region = _ellipsoid(shape, center, radii)
                vol[region] = level
                mask[region] = lab
        if config.blur_sigma > 0:
            vol = ndimage.gaussian_filter(vol, config.blur_sigma)
        if config.noise_sigma > 0:
            vol = vol + rng.normal(0.0, config.noise_sigma, size=shape)
        volumes[mod] = vol.astype(np.float32)
        masks[mod] = mask
    return volumes, masks


def generate_sample(config: SynthConfig, patient_id: str, label: int, specs: dict[str, RoiSpec]) -> PatientSample:
    volumes, masks = generate_patient(config, patient_id, label)
    return prepare_patient(patient_id, label, volumes, masks, specs, config.scheme)


def generate_dataset(config: SynthConfig, root: Path, specs: dict[str, RoiSpec] | None = None) -> dict:
    """Generate, prepare and write every patient plus ``manifest.json``; returns the manifest."""
    specs = specs or toy_roi_specs()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for pid, label, split in assign_labels(config):
        entries.append(write_sample(generate_sample(config, pid, label, specs), root, split))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "synth_config": config.to_dict(),
        "roi_specs": {n: {"source_modality": s.source_modality, "crop_dims": list(s.crop_dims),
                          "nuclei": list(s.nuclei), "target_size": s.target_size} for n, s in specs.items()},
        "class_names": ["background", *config.scheme.merged_names],
        "patients": entries,
    }
    write_manifest(root, manifest)
    return manifest


def specs_from_manifest(manifest: dict) -> dict[str, RoiSpec]:
    return {n: RoiSpec(n, s["source_modality"], tuple(s["crop_dims"]), tuple(s["nuclei"]), s["target_size"])
            for n, s in manifest["roi_specs"].items()}
