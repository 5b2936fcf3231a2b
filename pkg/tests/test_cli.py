import json
from pathlib import Path

import pytest

from cfr.cli import main
from cfr.config import (
    ConfigError,
    apply_overrides,
    experiment_config_from_dict,
    load_experiment_config,
    stage_hash,
)


def _tiny_config(tmp_path: Path, **ssl_overrides) -> Path:
    doc = {
        "dataset": {
            "dims": [16, 16, 16],
            "num_classes": 2,
            "n_train": 3,
            "n_test": 1,
            "m_labeled": 1,
            "seed": 5,
            "noise_sigma": 0.15,
        },
        "seg2d": {
            "input_size": 32,
            "patch_size": 4,
            "embed_dim": 16,
            "depth": 1,
            "num_heads": 2,
            "seed": 1,
        },
        "seg3d": {"base_channels": 2, "levels": 1, "seed": 2},
        "lora": {"rank": 2},
        "ssl": {
            "method": "mean_teacher",
            "epochs": 2,
            "finetune_epochs": 3,
            "ramp_len": 2,
            "seed": 3,
            **ssl_overrides,
        },
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


class TestConfig:
    def test_load_and_overrides(self, tmp_path):
        path = _tiny_config(tmp_path)
        cfg = load_experiment_config(path, ["ssl.lambda_max=0", "dataset.seed=9"])
        assert cfg.ssl.lambda_max == 0
        assert cfg.dataset.seed == 9

    def test_unknown_key_rejected(self, tmp_path):
        path = _tiny_config(tmp_path)
        with pytest.raises(ConfigError, match="unknown"):
            load_experiment_config(path, ["ssl.warp_speed=11"])

    def test_unknown_block_rejected(self):
        with pytest.raises(ConfigError, match="unknown config blocks"):
            experiment_config_from_dict({"dataset": {}, "cheese": {}})

    def test_from_dict_propagates_num_classes(self):
        cfg = experiment_config_from_dict({"dataset": {"num_classes": 3}})
        assert cfg.seg2d.num_classes == 3
        assert cfg.seg3d.num_classes == 3

    def test_cross_block_consistency_enforced(self):
        from cfr.config import DatasetBlock, ExperimentConfig
        from cfr.seg2d import Seg2DConfig

        with pytest.raises(ConfigError, match="num_classes"):
            ExperimentConfig(
                dataset=DatasetBlock(num_classes=3),
                seg2d=Seg2DConfig(num_classes=2),
            )

    def test_override_value_parsing(self):
        doc = apply_overrides({"a": {"b": 1}}, ["a.b=2.5", "a.c=text"])
        assert doc["a"]["b"] == 2.5
        assert doc["a"]["c"] == "text"

    def test_stage_hash_tracks_relevant_blocks_only(self, tmp_path):
        cfg = load_experiment_config(_tiny_config(tmp_path))
        cfg2 = load_experiment_config(_tiny_config(tmp_path), ["ssl.lambda_max=0.7"])
        assert stage_hash("gen", cfg) == stage_hash("gen", cfg2)
        assert stage_hash("finetune", cfg) == stage_hash("finetune", cfg2)
        assert stage_hash("retrain", cfg) != stage_hash("retrain", cfg2)
        cfg3 = load_experiment_config(_tiny_config(tmp_path), ["dataset.seed=77"])
        assert stage_hash("gen", cfg) != stage_hash("gen", cfg3)


class TestPipeline:
    def test_full_pipeline_and_artifacts(self, tmp_path):
        cfg = _tiny_config(tmp_path)
        out = tmp_path / "run"
        for stage in ("gen", "finetune", "pseudolabel", "retrain", "eval"):
            assert main([stage, "--config", str(cfg), "--out", str(out)]) == 0, stage
        assert main(["report", "--out", str(out)]) == 0

        for artifact in (
            "manifest.json", "seg2d.cfrc", "finetune_trace.csv", "pseudo/cache.json",
            "seg3d.cfrc", "trace.csv", "trace_steps.csv", "metrics.csv",
            "metrics.json", "report.md",
        ):
            assert (out / artifact).exists(), artifact

        summary = json.loads((out / "metrics.json").read_text())["summary"]
        assert summary["kind"] == "seg3d"
        assert 0.0 <= summary["dice"] <= 100.0
        report = (out / "report.md").read_text()
        assert "| run |" in report and "seg3d" in report

    def test_stage_order_enforced(self, tmp_path):
        cfg = _tiny_config(tmp_path)
        out = tmp_path / "run"
        assert main(["finetune", "--config", str(cfg), "--out", str(out)]) == 3
        assert main(["retrain", "--config", str(cfg), "--out", str(out)]) == 3
        assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 3

    def test_config_mismatch_refused(self, tmp_path):
        cfg = _tiny_config(tmp_path)
        out = tmp_path / "run"
        assert main(["gen", "--config", str(cfg), "--out", str(out)]) == 0
        # same run dir, different dataset config: downstream must refuse
        code = main(
            ["finetune", "--config", str(cfg), "--set", "dataset.seed=99", "--out", str(out)]
        )
        assert code == 3

    def test_config_error_exit_code(self, tmp_path):
        missing = tmp_path / "nope.json"
        assert main(["gen", "--config", str(missing), "--out", str(tmp_path / "o")]) == 2
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "o2")]) == 2

    def test_gen_rerun_byte_identical(self, tmp_path):
        cfg = _tiny_config(tmp_path)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["gen", "--config", str(cfg), "--out", str(out1)]) == 0
        assert main(["gen", "--config", str(cfg), "--out", str(out2)]) == 0
        vols1 = sorted((out1 / "volumes").iterdir())
        vols2 = sorted((out2 / "volumes").iterdir())
        assert [v.name for v in vols1] == [v.name for v in vols2]
        for a, b in zip(vols1, vols2):
            assert a.read_bytes() == b.read_bytes(), a.name
        assert (out1 / "manifest.json").read_text() == (out2 / "manifest.json").read_text()

    def test_finetune_rerun_byte_identical(self, tmp_path):
        cfg = _tiny_config(tmp_path)
        out = tmp_path / "run"
        assert main(["gen", "--config", str(cfg), "--out", str(out)]) == 0
        assert main(["finetune", "--config", str(cfg), "--out", str(out)]) == 0
        first = (out / "seg2d.cfrc").read_bytes()
        assert main(["finetune", "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "seg2d.cfrc").read_bytes() == first

    def test_lambda_zero_pipeline_matches_supervised(self, tmp_path):
        cfg = _tiny_config(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out, override in ((out_a, "ssl.lambda_max=0"), (out_b, "ssl.method=supervised")):
            for stage in ("gen", "retrain", "eval"):
                code = main(
                    [stage, "--config", str(cfg), "--set", override, "--out", str(out)]
                )
                assert code == 0, (stage, override)
        metrics_a = json.loads((out_a / "metrics.json").read_text())
        metrics_b = json.loads((out_b / "metrics.json").read_text())
        assert metrics_a["volumes"] == metrics_b["volumes"]

    def test_eval_seg2d_checkpoint(self, tmp_path):
        cfg = _tiny_config(tmp_path)
        out = tmp_path / "run"
        for stage in ("gen", "finetune"):
            assert main([stage, "--config", str(cfg), "--out", str(out)]) == 0
        code = main(
            [
                "eval", "--config", str(cfg), "--out", str(out),
                "--checkpoint", str(out / "seg2d.cfrc"),
            ]
        )
        assert code == 0
        summary = json.loads((out / "metrics.json").read_text())["summary"]
        assert summary["kind"] == "seg2d"
