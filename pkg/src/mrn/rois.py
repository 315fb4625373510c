"""ROI definitions and the crop / resize / mask transforms applied to patient volumes."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, MissingRoiError, ShapeError
from .losses import merge_lr_labels

ROI_ORDER = ("NM", "QSM1", "QSM2", "QSM3")
CLASS_NAMES = ("HC", "PD")

# Nucleus names; each is bilateral with distinct raw left/right label ids.
NUCLEI = ("SN", "caudate", "putamen", "GP", "thalamus", "STN", "RN", "dentate")


@dataclass(frozen=True)
class LabelScheme:
    """Raw left/right label ids per modality and the merged (side-agnostic) class ids."""

    nuclei: dict  # modality -> tuple of nucleus names present in that modality's mask

    def raw_ids(self, modality: str, nucleus: str) -> tuple[int, int]:
        names = self.nuclei[modality]
        i = names.index(nucleus)
        return 2 * i + 1, 2 * i + 2

    @property
    def merged_names(self) -> tuple[str, ...]:
        seen = []
        for names in self.nuclei.values():
            for n in names:
                if n not in seen:
                    seen.append(n)
        return tuple(seen)

    @property
    def num_classes(self) -> int:
        return len(self.merged_names) + 1

    def merge_table(self, modality: str) -> dict[int, int]:
        table = {0: 0}
        merged = self.merged_names
        for n in self.nuclei[modality]:
            left, right = self.raw_ids(modality, n)
            table[left] = table[right] = merged.index(n) + 1
        return table


FULL_SCHEME = LabelScheme({"NM": ("SN",), "QSM": NUCLEI})


@dataclass(frozen=True)
class RoiSpec:
    name: str
    source_modality: str
    crop_dims: tuple[int, int, int]
    nuclei: tuple[str, ...]
    target_size: int = 224

    def resized_dims(self) -> tuple[int, int, int]:
        d, h, w = self.crop_dims
        scale = self.target_size / max(h, w)
        return d, int(round(h * scale)), int(round(w * scale))


def canonical_roi_specs() -> dict[str, RoiSpec]:
    return {
        "NM": RoiSpec("NM", "NM", (12, 32, 64), ("SN",)),
        "QSM1": RoiSpec("QSM1", "QSM", (24, 128, 128), ("caudate", "putamen", "GP", "thalamus")),
        "QSM2": RoiSpec("QSM2", "QSM", (12, 64, 96), ("STN", "SN", "RN")),
        "QSM3": RoiSpec("QSM3", "QSM", (12, 48, 96), ("dentate",)),
    }


def toy_roi_specs(target_size: int = 48) -> dict[str, RoiSpec]:
    """Desk-scale ROIs: canonical in-plane extents divided by 4, depths by 3."""
    return {
        "NM": RoiSpec("NM", "NM", (4, 8, 16), ("SN",), target_size),
        "QSM1": RoiSpec("QSM1", "QSM", (8, 32, 32), ("caudate", "putamen", "GP", "thalamus"), target_size),
        "QSM2": RoiSpec("QSM2", "QSM", (4, 16, 24), ("STN", "SN", "RN"), target_size),
        "QSM3": RoiSpec("QSM3", "QSM", (4, 12, 24), ("dentate",), target_size),
    }


def validate_roi_geometry(specs: dict[str, RoiSpec], patch_size: int) -> None:
    """Reject ROI sets whose resized slices are not divisible by the patch size and by 4."""
    for spec in specs.values():
        _, h, w = spec.resized_dims()
        for v in (h, w):
            if v % patch_size or v % 4:
                raise ConfigError(
                    f"ROI {spec.name}: resized slice {h}x{w} not divisible by patch size {patch_size} and 4"
                )


@dataclass
class RoiVolume:
    intensity: np.ndarray  # (D, H, W) float32
    labels: np.ndarray  # (D, H, W) uint8
    origin: tuple[int, int, int] = (0, 0, 0)  # crop start in the source volume

    def __post_init__(self):
        if self.intensity.shape != self.labels.shape:
            raise ShapeError(f"intensity {self.intensity.shape} vs labels {self.labels.shape}")


@dataclass
class PatientSample:
    patient_id: str
    label: int  # 0 = HC, 1 = PD
    rois: dict[str, RoiVolume] = field(default_factory=dict)

    def __post_init__(self):
        if self.rois and set(self.rois) != set(ROI_ORDER):
            raise ShapeError(f"patient {self.patient_id}: ROIs {sorted(self.rois)} != {list(ROI_ORDER)}")


def crop_window(mask: np.ndarray, target_ids, dims) -> tuple[int, int, int]:
    hit = np.isin(mask, list(target_ids))
    if not hit.any():
        raise MissingRoiError(f"none of labels {sorted(target_ids)} present in mask")
    start = []
    for axis, d in enumerate(dims):
        other = tuple(a for a in range(mask.ndim) if a != axis)
        idx = np.flatnonzero(hit.any(axis=other))
        lo, hi = int(idx[0]), int(idx[-1])
        start.append(lo + ((hi - lo + 1) - d) // 2)
    return tuple(start)


def _extract(volume: np.ndarray, start, dims) -> np.ndarray:
    out = np.zeros(dims, dtype=volume.dtype)
    src, dst = [], []
    for s, d, n in zip(start, dims, volume.shape):
        a, b = max(s, 0), min(s + d, n)
        if b <= a:
            return out
        src.append(slice(a, b))
        dst.append(slice(a - s, b - s))
    out[tuple(dst)] = volume[tuple(src)]
    return out


def crop_roi(volume: np.ndarray, nuclei_mask: np.ndarray, spec: RoiSpec, scheme: LabelScheme = FULL_SCHEME) -> RoiVolume:
    """Crop ``spec.crop_dims`` centred on the bounding box of the spec's nuclei.

    The window is not shifted at the volume boundary; parts falling outside
    are zero-filled so the crop always has the exact spec dimensions.
    """
    present = scheme.nuclei[spec.source_modality]
    ids = [i for n in spec.nuclei if n in present for i in scheme.raw_ids(spec.source_modality, n)]
    start = crop_window(nuclei_mask, ids, spec.crop_dims)
    return RoiVolume(
        _extract(volume, start, spec.crop_dims).astype(np.float32),
        _extract(nuclei_mask, start, spec.crop_dims).astype(np.uint8),
        start,
    )


def resize_roi(roi: RoiVolume, spec: RoiSpec) -> RoiVolume:
    """Bilinear in-plane resize so the longest side equals ``spec.target_size``; labels use nearest."""
    if roi.intensity.shape != spec.crop_dims:
        raise ShapeError(f"ROI {spec.name}: shape {roi.intensity.shape} != crop dims {spec.crop_dims}")
    d, h, w = spec.resized_dims()
    if (h, w) == roi.intensity.shape[1:]:
        return RoiVolume(roi.intensity.copy(), roi.labels.copy(), roi.origin)
    x = torch.from_numpy(np.ascontiguousarray(roi.intensity, dtype=np.float32)).unsqueeze(1)
    y = torch.from_numpy(roi.labels.astype(np.float32)).unsqueeze(1)
    xi = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    yi = F.interpolate(y, size=(h, w), mode="nearest-exact")
    return RoiVolume(xi[:, 0].numpy(), yi[:, 0].numpy().astype(np.uint8), roi.origin)


def minmax_scale(volume: np.ndarray) -> np.ndarray:
    lo, hi = float(volume.min()), float(volume.max())
    if hi <= lo:
        return np.zeros_like(volume, dtype=np.float32)
    return ((volume - lo) / (hi - lo)).astype(np.float32)


def prepare_patient(
    patient_id: str,
    label: int,
    volumes: dict[str, np.ndarray],
    masks: dict[str, np.ndarray],
    specs: dict[str, RoiSpec],
    scheme: LabelScheme = FULL_SCHEME,
) -> PatientSample:
    """Crop, resize, min-max scale and label-merge all four ROIs of one patient."""
    rois = {}
    for name in ROI_ORDER:
        spec = specs[name]
        mod = spec.source_modality
        roi = resize_roi(crop_roi(volumes[mod], masks[mod], spec, scheme), spec)
        rois[name] = RoiVolume(minmax_scale(roi.intensity), merge_lr_labels(roi.labels, scheme.merge_table(mod)),
                               roi.origin)
    return PatientSample(patient_id, label, rois)


MaskPattern = tuple  # (mask_NM, mask_QSM1, mask_QSM2, mask_QSM3)


def all_mask_patterns() -> list[tuple[bool, bool, bool, bool]]:
    """All 16 subsets of the four ROIs: empty first, then by size, lexicographic within a size."""
    patterns = []
    for k in range(5):
        for combo in itertools.combinations(range(4), k):
            patterns.append(tuple(i in combo for i in range(4)))
    return patterns


def apply_mask(sample: PatientSample, pattern) -> PatientSample:
    """Zero the intensity volume of every masked ROI; label grids are kept."""
    if len(pattern) != 4:
        raise ShapeError("mask pattern needs four entries")
    rois = {}
    for name, masked in zip(ROI_ORDER, pattern):
        roi = sample.rois[name]
        rois[name] = replace(roi, intensity=np.zeros_like(roi.intensity)) if masked else roi
    return PatientSample(sample.patient_id, sample.label, rois)
