"""Training-time augmentations applied independently to each prepared ROI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .rois import PatientSample, RoiVolume


@dataclass
class AugmentConfig:
    p_mirror: float = 0.5
    p_rotate: float = 0.2
    max_rotation_deg: float = 10.0
    p_intensity_shift: float = 0.2
    intensity_shift: float = 0.1
    p_contrast: float = 0.2
    contrast_range: tuple[float, float] = (0.75, 1.25)
    p_noise: float = 0.2
    noise_sigma: float = 0.03
    p_histogram_shift: float = 0.2
    histogram_shift: float = 0.1

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_mirror=0, p_rotate=0, p_intensity_shift=0, p_contrast=0, p_noise=0, p_histogram_shift=0)


def mirror(intensity: np.ndarray, labels: np.ndarray):
    """Left-right flip of intensity and (side-merged) labels."""
    return intensity[..., ::-1].copy(), labels[..., ::-1].copy()


def rotate(intensity, labels, angle_deg: float):
    x = ndimage.rotate(intensity, angle_deg, axes=(1, 2), reshape=False, order=1, mode="nearest")
    y = ndimage.rotate(labels, angle_deg, axes=(1, 2), reshape=False, order=0, mode="constant", cval=0)
    return x.astype(intensity.dtype), y.astype(labels.dtype)


def shift_intensity(intensity, delta: float):
    return (intensity + delta).astype(intensity.dtype)


def adjust_contrast(intensity, factor: float):
    mean = intensity.mean()
    return ((intensity - mean) * factor + mean).astype(intensity.dtype)


def histogram_shift(intensity, rng: np.random.Generator, amount: float):
    """Monotone piecewise-linear intensity remap through three random interior control points."""
    lo, hi = float(intensity.min()), float(intensity.max())
    if hi <= lo:
        return intensity.copy()
    src = np.sort(rng.uniform(lo, hi, size=3))
    dst = np.sort(src + rng.uniform(-amount, amount, size=3) * (hi - lo))
    xs = np.concatenate([[lo], src, [hi]])
    ys = np.clip(np.concatenate([[lo], dst, [hi]]), lo, hi)
    ys = np.maximum.accumulate(ys)
    return np.interp(intensity, xs, ys).astype(intensity.dtype)


def augment_roi(roi: RoiVolume, cfg: AugmentConfig, rng: np.random.Generator) -> RoiVolume:
    x, y = roi.intensity, roi.labels
    if rng.random() < cfg.p_mirror:
        x, y = mirror(x, y)
    if rng.random() < cfg.p_rotate:
        x, y = rotate(x, y, rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    if rng.random() < cfg.p_intensity_shift:
        x = shift_intensity(x, rng.uniform(-cfg.intensity_shift, cfg.intensity_shift))
    if rng.random() < cfg.p_contrast:
        x = adjust_contrast(x, rng.uniform(*cfg.contrast_range))
    if rng.random() < cfg.p_noise:
        x = (x + rng.normal(0.0, cfg.noise_sigma, size=x.shape)).astype(x.dtype)
    if rng.random() < cfg.p_histogram_shift:
        x = histogram_shift(x, rng, cfg.histogram_shift)
    return RoiVolume(x, y, roi.origin)


def augment(sample: PatientSample, cfg: AugmentConfig, rng: np.random.Generator) -> PatientSample:
    rois = {name: augment_roi(roi, cfg, rng) for name, roi in sample.rois.items()}
    return PatientSample(sample.patient_id, sample.label, rois)
