"""Config validation, run artifacts, determinism, and summaries."""

import json

import numpy as np
import pytest
import yaml

from fedivon.cli import (
    ConfigError,
    ExperimentConfig,
    config_to_dict,
    main,
    parse_config,
    parse_config_dict,
    run,
    summarize,
)

SMALL_RUN = {
    "name": "t",
    "seed": 5,
    "federation": {"n_clients": 4, "rounds": 2, "participation_fraction": 0.5},
    "model": {"layer_sizes": [4, 8, 3]},
    "ivon": {"epochs": 1, "batch_size": 16, "ess": None},
    "data": {
        "generator": "blobs",
        "blobs": {"n_classes": 3, "n_per_class": 40, "dim": 4, "separation": 6.0},
        "partition": {"scheme": "shard", "shards_per_client": 1},
    },
    "metrics": {"mc_test_samples": 4},
}


def small_config(tmp_path, **overrides):
    raw = json.loads(json.dumps(SMALL_RUN))
    raw.update(overrides)
    raw["output_dir"] = str(tmp_path)
    return parse_config_dict(raw)


class TestParseConfig:
    def test_minimal_config_fills_documented_defaults(self):
        cfg = parse_config_dict({})
        ivon = cfg.federation.ivon
        assert ivon.beta1 == 0.9
        assert ivon.beta2 == 0.99999
        assert ivon.h_init == 1.0
        assert ivon.ess == 5000.0
        assert ivon.lr_initial == 0.1 and ivon.lr_final == 0.01
        assert ivon.weight_decay == 2e-4 and ivon.batch_size == 32
        assert cfg.metrics.ece_bins == 10

    def test_out_of_range_fraction_names_field(self):
        with pytest.raises(ConfigError, match="participation_fraction"):
            parse_config_dict({"federation": {"participation_fraction": 1.5}})

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_dict({"federaton": {}})

    def test_all_problems_reported_at_once(self):
        try:
            parse_config_dict({
                "seed": "zero",
                "federation": {"participation_fraction": 2.0, "rounds": -1},
                "ivon": {"beta1": 1.5},
            })
        except ConfigError as exc:
            joined = "\n".join(exc.problems)
            assert "seed" in joined
            assert "participation_fraction" in joined
            assert "rounds" in joined
            assert "beta1" in joined
            assert len(exc.problems) >= 4
        else:
            pytest.fail("expected ConfigError")

    def test_round_trip(self, tmp_path):
        cfg = parse_config_dict(SMALL_RUN)
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(config_to_dict(cfg)))
        again = parse_config(path)
        assert again == cfg

    def test_json_config_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(SMALL_RUN))
        assert parse_config(path) == parse_config_dict(SMALL_RUN)

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            parse_config("/nonexistent/config.yaml")

    def test_null_ess_means_dataset_size(self):
        cfg = parse_config_dict({"ivon": {"ess": None}})
        assert cfg.federation.ivon.ess is None

    def test_personalized_mode_materializes_beta(self):
        cfg = parse_config_dict({"experiment": {"mode": "personalized"}})
        assert cfg.federation.personalization is not None
        assert cfg.federation.personalization.beta == 1.0

    def test_concept_drift_requires_superclass_generator(self):
        with pytest.raises(ConfigError, match="concept_drift"):
            parse_config_dict({"data": {"partition": {"scheme": "concept_drift"}}})


class TestRun:
    def test_artifacts_written(self, tmp_path):
        cfg = small_config(tmp_path)
        run_dir = run(cfg)
        assert (run_dir / "manifest.json").exists()
        assert (run_dir / "metrics.jsonl").exists()
        assert (run_dir / "summary.csv").exists()
        assert (run_dir / "checkpoint.json").exists()
        assert (run_dir / "history.json").exists()
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["config_sha256"]
        assert manifest["config"]["federation"]["rounds"] == 2

    def test_metrics_schema(self, tmp_path):
        run_dir = run(small_config(tmp_path))
        lines = (run_dir / "metrics.jsonl").read_text().splitlines()
        assert lines
        for line in lines:
            rec = json.loads(line)
            assert set(rec) >= {"round", "split", "algorithm", "acc", "nll", "ece", "brier", "n", "mc_samples"}

    def test_identical_runs_byte_identical_metrics(self, tmp_path):
        d1 = run(small_config(tmp_path / "a"))
        d2 = run(small_config(tmp_path / "b"))
        assert (d1 / "metrics.jsonl").read_bytes() == (d2 / "metrics.jsonl").read_bytes()

    def test_parallel_runs_byte_identical(self, tmp_path):
        d1 = run(small_config(tmp_path / "a"), parallel=1)
        d2 = run(small_config(tmp_path / "b"), parallel=4)
        assert (d1 / "metrics.jsonl").read_bytes() == (d2 / "metrics.jsonl").read_bytes()

    def test_seed_override_changes_stream(self, tmp_path):
        d1 = run(small_config(tmp_path / "a"))
        d2 = run(small_config(tmp_path / "b"), seed=99)
        assert (d1 / "metrics.jsonl").read_bytes() != (d2 / "metrics.jsonl").read_bytes()

    def test_env_var_overrides_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FEDIVON_OUTPUT", str(tmp_path / "env_out"))
        cfg = parse_config_dict(SMALL_RUN)
        run_dir = run(cfg)
        assert run_dir.parent == tmp_path / "env_out"

    def test_model_data_mismatch_reported(self, tmp_path):
        cfg = small_config(tmp_path, model={"layer_sizes": [5, 8, 3]})
        with pytest.raises(ConfigError, match="input dim"):
            run(cfg)

    def test_resume_continues_to_same_result(self, tmp_path):
        full = run(small_config(tmp_path / "full", federation={
            "n_clients": 4, "rounds": 4, "participation_fraction": 0.5}))
        part_cfg = small_config(tmp_path / "part", federation={
            "n_clients": 4, "rounds": 2, "participation_fraction": 0.5})
        part_dir = run(part_cfg)
        resumed_cfg = small_config(tmp_path / "part", federation={
            "n_clients": 4, "rounds": 4, "participation_fraction": 0.5})
        resumed_dir = run(resumed_cfg, resume=True)
        assert resumed_dir == part_dir
        full_ckpt = json.loads((full / "checkpoint.json").read_text())
        res_ckpt = json.loads((resumed_dir / "checkpoint.json").read_text())
        assert full_ckpt["global"] == res_ckpt["global"]


class TestModes:
    def test_ood_mode_emits_auroc(self, tmp_path):
        cfg = small_config(tmp_path, experiment={"mode": "ood"},
                           metrics={"mc_test_samples": 4, "ood": {"n_samples": 40, "margin": 3.0}})
        run_dir = run(cfg)
        records = [json.loads(l) for l in (run_dir / "metrics.jsonl").read_text().splitlines()]
        assert any("auroc" in r for r in records)

    def test_ablation_mode_emits_tagged_sub_runs(self, tmp_path):
        cfg = small_config(tmp_path, experiment={"mode": "ablation", "ablation_epochs": [1, 2]})
        run_dir = run(cfg)
        assert (run_dir / "E1" / "metrics.jsonl").exists()
        assert (run_dir / "E2" / "metrics.jsonl").exists()
        m1 = json.loads((run_dir / "E1" / "manifest.json").read_text())
        m2 = json.loads((run_dir / "E2" / "manifest.json").read_text())
        assert m1["config"]["ivon"]["epochs"] == 1
        assert m2["config"]["ivon"]["epochs"] == 2
        rows = summarize(run_dir)
        assert {r["run"] for r in rows} == {"E1", "E2"}

    def test_personalized_mode_runs(self, tmp_path):
        cfg = small_config(
            tmp_path,
            experiment={"mode": "personalized"},
            data={
                "generator": "blobs",
                "blobs": {"n_classes": 3, "n_per_class": 40, "dim": 4, "separation": 6.0},
                "partition": {"scheme": "class_skew", "classes_per_client": 2},
            },
        )
        run_dir = run(cfg)
        records = [json.loads(l) for l in (run_dir / "metrics.jsonl").read_text().splitlines()]
        assert {"test", "client_test"} <= {r["split"] for r in records}


class TestSummarize:
    def test_single_run_two_rows(self, tmp_path):
        run_dir = run(small_config(tmp_path))
        rows = summarize(run_dir)
        assert len(rows) == 2
        assert {r["variant"] for r in rows} == {"@mean", "mc"}

    def test_idempotent(self, tmp_path):
        run_dir = run(small_config(tmp_path))
        rows1 = summarize(run_dir)
        csv1 = (run_dir / "summary.csv").read_bytes()
        rows2 = summarize(run_dir)
        assert rows1 == rows2
        assert (run_dir / "summary.csv").read_bytes() == csv1

    def test_column_order_fixed(self, tmp_path):
        run_dir = run(small_config(tmp_path))
        header = (run_dir / "summary.csv").read_text().splitlines()[0]
        assert header == "run,algorithm,split,variant,acc,ece,nll,brier"

    def test_missing_run_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            summarize(tmp_path / "nothing")

    def test_fedavg_emits_single_mean_row(self, tmp_path):
        cfg = small_config(tmp_path, federation={
            "n_clients": 4, "rounds": 1, "participation_fraction": 1.0, "algorithm": "fedavg"})
        run_dir = run(cfg)
        rows = summarize(run_dir)
        assert len(rows) == 1
        assert rows[0]["variant"] == "@mean" and rows[0]["algorithm"] == "fedavg"


class TestMain:
    def test_run_and_summarize_exit_zero(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.yaml"
        raw = json.loads(json.dumps(SMALL_RUN))
        raw["output_dir"] = str(tmp_path / "out")
        cfg_path.write_text(yaml.safe_dump(raw))
        assert main(["run", str(cfg_path)]) == 0
        assert main(["summarize", str(tmp_path / "out" / "t")]) == 0
        out = capsys.readouterr().out
        assert "fedivon" in out and "@mean" in out

    def test_bad_config_exits_nonzero_with_report(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.yaml"
        cfg_path.write_text("federation:\n  rounds: -3\n")
        assert main(["run", str(cfg_path)]) == 1
        err = capsys.readouterr().err
        report = json.loads(err)
        assert report["error"] == "ConfigError"
        assert any("rounds" in p for p in report["problems"])

    def test_missing_summarize_dir_exits_nonzero(self, tmp_path, capsys):
        assert main(["summarize", str(tmp_path / "none")]) == 1
        report = json.loads(capsys.readouterr().err)
        assert report["error"] == "FileNotFoundError"
