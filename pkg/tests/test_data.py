import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrn.augment import AugmentConfig, augment, histogram_shift, mirror, shift_intensity
from mrn.errors import ConfigError, DataError, StorageError
from mrn.rois import ROI_ORDER, crop_window, toy_roi_specs
from mrn.storage import load_dataset, load_sample, read_manifest, read_tensor, write_sample, write_tensor
from mrn.synth import SynthConfig, assign_labels, generate_patient, generate_sample


def sn_mean(cfg, pid, label):
    vols, masks = generate_patient(cfg, pid, label)
    return float(vols["NM"][masks["NM"] > 0].mean())


class TestSynth:
    def test_deterministic(self):
        cfg = SynthConfig(num_patients=4, seed=5)
        a, b = generate_patient(cfg, "P0001", 1), generate_patient(cfg, "P0001", 1)
        for mod in ("NM", "QSM"):
            assert np.array_equal(a[0][mod], b[0][mod]) and np.array_equal(a[1][mod], b[1][mod])

    def test_exact_balance_and_holdout(self):
        rows = assign_labels(SynthConfig(num_patients=40, class_balance=0.5, holdout_fraction=0.25))
        labels = [r[1] for r in rows]
        assert sum(labels) == 20
        test = [r for r in rows if r[2] == "test"]
        assert len(test) == 10 and sum(r[1] for r in test) == 5

    @pytest.mark.parametrize("n, balance", [(41, 0.5), (30, 0.3)])
    def test_balance_within_one(self, n, balance):
        labels = [r[1] for r in assign_labels(SynthConfig(num_patients=n, class_balance=balance))]
        assert abs(sum(labels) - n * balance) <= 1

    def test_threshold_rule_separates_without_noise(self):
        cfg = SynthConfig(num_patients=50, noise_sigma=0.0, seed=11)
        rows = assign_labels(cfg)
        means = np.array([sn_mean(cfg, pid, y) for pid, y, _ in rows])
        labels = np.array([y for _, y, _ in rows])
        # PD nigra is darker: any threshold between the class ranges classifies perfectly.
        assert means[labels == 1].max() < means[labels == 0].min()
        thr = (means[labels == 1].max() + means[labels == 0].min()) / 2
        assert np.mean((means < thr) == (labels == 1)) == 1.0

    def test_no_signal_makes_classes_identical(self):
        cfg = SynthConfig(signal_strength=0.0, seed=2)
        hc, pd = generate_patient(cfg, "P0003", 0), generate_patient(cfg, "P0003", 1)
        assert np.array_equal(hc[0]["NM"], pd[0]["NM"]) and np.array_equal(hc[0]["QSM"], pd[0]["QSM"])

    def test_signal_confined_to_sn_and_midbrain(self):
        cfg = SynthConfig(noise_sigma=0.0, blur_sigma=0.0, seed=2)
        (hc, hm), (pd, _) = generate_patient(cfg, "P0001", 0), generate_patient(cfg, "P0001", 1)
        scheme = cfg.scheme
        sn_nm = np.isin(hm["NM"], scheme.raw_ids("NM", "SN"))
        assert np.array_equal(hc["NM"][~sn_nm], pd["NM"][~sn_nm]) and (hc["NM"][sn_nm] > pd["NM"][sn_nm]).all()
        sig = np.isin(hm["QSM"], [i for n in cfg.qsm_signal_nuclei for i in scheme.raw_ids("QSM", n)])
        assert np.array_equal(hc["QSM"][~sig], pd["QSM"][~sig]) and (pd["QSM"][sig] > hc["QSM"][sig]).all()

    def test_crops_fit_without_padding(self):
        cfg = SynthConfig(seed=4)
        scheme = cfg.scheme
        for pid in ("P0000", "P0001", "P0002"):
            vols, masks = generate_patient(cfg, pid, 0)
            for spec in toy_roi_specs().values():
                mod = spec.source_modality
                ids = [i for n in spec.nuclei if n in scheme.nuclei[mod] for i in scheme.raw_ids(mod, n)]
                start = crop_window(masks[mod], ids, spec.crop_dims)
                assert all(0 <= s and s + d <= n for s, d, n in zip(start, spec.crop_dims, vols[mod].shape))

    def test_labels_within_declared_ids(self):
        cfg = SynthConfig(seed=1)
        sample = generate_sample(cfg, "P0000", 1, toy_roi_specs())
        for roi in sample.rois.values():
            assert set(np.unique(roi.labels)) <= set(range(cfg.scheme.num_classes))

    def test_out_of_bounds_geometry(self):
        with pytest.raises(ConfigError):
            SynthConfig(nm_dims=(4, 10, 10))


class TestStorage:
    def test_sample_round_trip(self, tmp_path):
        sample = generate_sample(SynthConfig(seed=1), "P0007", 1, toy_roi_specs())
        entry = write_sample(sample, tmp_path, "test")
        back = load_sample(entry, tmp_path)
        assert back.label == 1 and entry["split_tag"] == "test"
        for n in ROI_ORDER:
            assert back.rois[n].intensity.tobytes() == sample.rois[n].intensity.tobytes()
            assert back.rois[n].labels.tobytes() == sample.rois[n].labels.tobytes()

    def test_truncated_file(self, tmp_path):
        write_tensor(tmp_path / "x.f32", np.zeros((2, 3, 4), np.float32))
        raw = (tmp_path / "x.f32").read_bytes()
        (tmp_path / "x.f32").write_bytes(raw[:-4])
        with pytest.raises(StorageError, match="x.f32"):
            read_tensor(tmp_path / "x.f32")

    def test_sidecar_shape_mismatch(self, tmp_path):
        write_tensor(tmp_path / "x.f32", np.zeros((2, 3, 4), np.float32))
        meta = json.loads((tmp_path / "x.f32.json").read_text())
        meta["shape"] = [2, 3, 5]
        (tmp_path / "x.f32.json").write_text(json.dumps(meta))
        with pytest.raises(DataError):
            read_tensor(tmp_path / "x.f32")

    def test_dataset_manifest(self, small_dataset):
        root, manifest = small_dataset
        assert read_manifest(root)["schema_version"] == 1
        everything = load_dataset(root)
        test = load_dataset(root, "test")
        assert len(everything) == 12 and 0 < len(test) < 12
        assert [s.patient_id for s in everything] == [p["patient_id"] for p in manifest["patients"]]

    def test_parallel_loading_matches_serial(self, small_dataset):
        root, _ = small_dataset
        a, b = load_dataset(root), load_dataset(root, workers=3)
        assert all(x.rois["NM"].intensity.tobytes() == y.rois["NM"].intensity.tobytes() for x, y in zip(a, b))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(StorageError, match="manifest"):
            load_dataset(tmp_path)


@pytest.fixture(scope="module")
def sample():
    return generate_sample(SynthConfig(seed=9), "P0002", 1, toy_roi_specs())


class TestAugment:
    def test_disabled_is_identity(self, sample):
        out = augment(sample, AugmentConfig.disabled(), np.random.default_rng(0))
        assert all(np.array_equal(out.rois[n].intensity, sample.rois[n].intensity) for n in ROI_ORDER)

    def test_mirror_involution(self, sample):
        roi = sample.rois["QSM1"]
        x, y = mirror(*mirror(roi.intensity, roi.labels))
        assert np.array_equal(x, roi.intensity) and np.array_equal(y, roi.labels)

    def test_shift_round_trip(self, sample):
        x = sample.rois["NM"].intensity
        assert np.allclose(shift_intensity(shift_intensity(x, 0.1), -0.1), x, atol=1e-6)

    def test_histogram_shift_is_monotone(self):
        x = np.linspace(0, 1, 200, dtype=np.float32)
        y = histogram_shift(x, np.random.default_rng(3), 0.1)
        assert (np.diff(y) >= 0).all() and y[0] == 0 and y[-1] == 1

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_label_and_classes_preserved(self, sample, seed):
        cfg = AugmentConfig(p_mirror=0.5, p_rotate=1.0, p_intensity_shift=1, p_contrast=1, p_noise=1,
                            p_histogram_shift=1)
        out = augment(sample, cfg, np.random.default_rng(seed))
        assert out.label == sample.label
        for n in ROI_ORDER:
            assert set(np.unique(out.rois[n].labels)) == set(np.unique(sample.rois[n].labels))
            assert out.rois[n].intensity.shape == sample.rois[n].intensity.shape
