import csv
import json

import pytest
import yaml

from mrn.cli import main
from mrn.config import RunConfig, build, load_run_config, to_dict
from mrn.errors import ConfigError
from mrn.gradcheck import SUITES, TOLERANCE, run_gradcheck

TINY = {
    "synth": {"num_patients": 12, "seed": 1},
    "roi": {"preset": "toy", "target_size": 48},
    "model": {
        "encoder": {"patch_size": 8, "channel_dim": 8, "depth": 1, "num_heads": 2, "num_register_tokens": 0,
                    "drop_path_rate": 0.0, "max_grid": [6, 6]},
        "fusion": {"num_ffa_layers": 2, "num_sfa_layers": 1, "num_heads": 2, "max_depth": 16},
        "dpt": {"projection_channels": [4, 8, 8, 8], "fusion_channels": 8, "num_classes": 6},
        "proj_dim": 8,
    },
    "train": {"epochs_pretrain": 1, "epochs_finetune": 1, "lr_backbone": 0.001, "lr_heads": 0.001,
              "moco": {"bank_size": 16}},
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


class TestRunConfig:
    def test_defaults_follow_reference_setup(self):
        cfg = RunConfig()
        assert cfg.train.total_epochs == 600 and cfg.train.moco.bank_size == 1024
        assert cfg.model.encoder.patch_size == 14 and cfg.model.encoder.channel_dim == 768
        assert cfg.model.fusion.num_ffa_layers == 3 and cfg.model.fusion.num_sfa_layers == 2

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            build(RunConfig, {"train": {"learning_rate": 1.0}})

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError):
            build(RunConfig, {"optimizer": {}})

    def test_round_trip(self, cfg_file, tmp_path):
        cfg = load_run_config(cfg_file)
        again = tmp_path / "again.yaml"
        again.write_text(yaml.safe_dump(to_dict(cfg)))
        assert to_dict(load_run_config(again)) == to_dict(cfg)

    def test_json_accepted(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"train": {"seed": 9}}))
        assert load_run_config(path).train.seed == 9


class TestSynthCommand:
    def test_summary_and_reproducible(self, cfg_file, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--config", str(cfg_file), "--out", str(a), "--patients", "40", "--seed", "1"]) == 0
        out = capsys.readouterr().out
        assert "HC 20, PD 20" in out
        assert main(["synth", "--config", str(cfg_file), "--out", str(b), "--patients", "40", "--seed", "1"]) == 0
        assert (a / "manifest.json").read_text() == (b / "manifest.json").read_text()

    def test_refuses_non_empty_dir(self, cfg_file, tmp_path):
        out = tmp_path / "d"
        out.mkdir()
        (out / "junk").write_text("x")
        assert main(["synth", "--config", str(cfg_file), "--out", str(out)]) == 1
        assert main(["synth", "--config", str(cfg_file), "--out", str(out), "--force"]) == 0

    def test_invalid_geometry(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump({"synth": {"nm_dims": [4, 10, 10]}}))
        assert main(["synth", "--config", str(path), "--out", str(tmp_path / "o")]) != 0
        assert "exceeds volume bounds" in capsys.readouterr().err

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth"])
        assert exc.value.code == 1


class TestPipeline:
    def test_train_eval_ablate(self, cfg_file, tmp_path, capsys):
        data, run = tmp_path / "data", tmp_path / "run"
        assert main(["synth", "--config", str(cfg_file), "--out", str(data), "--patients", "40"]) == 0
        assert main(["train", "--config", str(cfg_file), "--data", str(data), "--out", str(run)]) == 0
        assert (run / "pretrain_final.zip").exists() and (run / "finetune_final.zip").exists()
        echoed = load_run_config(run / "config.yaml")
        assert echoed.train.epochs_pretrain == 1 and echoed.model.dpt.num_classes == 6
        capsys.readouterr()

        assert main(["eval", "--data", str(data), "--checkpoint", str(run / "finetune_final.zip"),
                     "--out", str(run)]) == 0
        report = json.loads((run / "metrics.json").read_text())
        assert sum(report["counts"].values()) == 8

        assert main(["ablate", "--data", str(data), "--checkpoint", str(run / "finetune_final.zip"),
                     "--out", str(run)]) == 0
        with (run / "ablation.csv").open() as fh:
            assert len(list(csv.DictReader(fh))) == 17

    def test_untrained_model_is_near_chance(self, cfg_file, tmp_path):
        from mrn.checkpoint import save_checkpoint
        from mrn.model import MRN

        data = tmp_path / "data"
        cfg = dict(TINY, synth={"num_patients": 200, "seed": 4})
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump(cfg))
        main(["synth", "--config", str(path), "--out", str(data)])
        import torch

        torch.manual_seed(0)
        ckpt = save_checkpoint(tmp_path / "init.zip", MRN(load_run_config(path).model))
        assert main(["eval", "--data", str(data), "--checkpoint", str(ckpt), "--out", str(tmp_path / "e")]) == 0
        acc = json.loads((tmp_path / "e" / "metrics.json").read_text())["accuracy"]
        assert 0.3 <= acc <= 0.7

    def test_missing_checkpoint(self, cfg_file, tmp_path, capsys):
        data = tmp_path / "data"
        main(["synth", "--config", str(cfg_file), "--out", str(data)])
        code = main(["eval", "--data", str(data), "--checkpoint", str(tmp_path / "missing.zip")])
        assert code == 2 and "missing.zip" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path, capsys):
        (tmp_path / "ck.zip").write_bytes(b"")
        code = main(["train", "--data", str(tmp_path / "nodata"), "--out", str(tmp_path / "r")])
        assert code == 2 and "manifest" in capsys.readouterr().err

    def test_class_count_mismatch(self, cfg_file, tmp_path):
        data = tmp_path / "data"
        main(["synth", "--config", str(cfg_file), "--out", str(data)])
        bad = dict(TINY, model=dict(TINY["model"], dpt=dict(TINY["model"]["dpt"], num_classes=2)))
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump(bad))
        assert main(["train", "--config", str(path), "--data", str(data), "--out", str(tmp_path / "r")]) == 1


class TestGradcheck:
    def test_all_suites_pass(self, capsys):
        assert main(["gradcheck"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert [l.split()[0] for l in lines] == list(SUITES) and len(lines) == 6

    def test_corrupted_gradient_fails(self):
        assert main(["gradcheck", "--corrupt", "sfa"]) == 3

    def test_every_suite_within_tolerance(self):
        for r in run_gradcheck(seed=1):
            assert r.worst <= TOLERANCE, (r.name, r.worst)
