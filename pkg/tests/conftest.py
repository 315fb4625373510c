import numpy as np
import pytest
import torch

from mrn.model import MRNConfig
from mrn.rois import ROI_ORDER, PatientSample, RoiVolume, toy_roi_specs
from mrn.synth import SynthConfig, generate_dataset

torch.set_num_threads(1)


def tiny_model_config(num_classes: int = 6, **kw) -> MRNConfig:
    """Smallest MRN that accepts the toy ROI specs (48-pixel side, 8-pixel patches)."""
    args = dict(channels=8, depth=1, heads=2, patch_size=8, max_grid=(6, 6), ffa=2, sfa=1,
                num_classes=num_classes, proj_dim=8, proj_channels=(4, 8, 8, 8), fusion_channels=8)
    args.update(kw)
    return MRNConfig.toy(**args)


def random_sample(pid="X0", label=0, seed=0, num_classes=6) -> PatientSample:
    rng = np.random.default_rng(seed)
    rois = {}
    for name, spec in toy_roi_specs().items():
        dims = spec.resized_dims()
        rois[name] = RoiVolume(rng.random(dims, dtype=np.float32),
                               rng.integers(0, num_classes, dims).astype(np.uint8))
    return PatientSample(pid, label, rois)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    manifest = generate_dataset(SynthConfig(num_patients=12, seed=3), root)
    return root, manifest


_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[number] = line
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


__all__ = ["tiny_model_config", "random_sample", "ROI_ORDER"]
