import json
from pathlib import Path

import numpy as np
import pytest

from dgkan.cli import (ConfigError, ExperimentConfig, config_hash, config_lines, dump_embeddings,
                       dump_profile, main, parse_config_text, parse_scores_csv, pca_2d, report,
                       run_experiment, scores_csv_text, trainer_config, validate_config)
from dgkan.continual import Trainer, average_forgetting, run_stream
from dgkan.numcore import ContractViolation, RngStream
from dgkan.synthbench import gen_sequence

TINY = """\
config_version = 1
protocol = four-task
seed = 11
epochs = 2
train_samples = 96
eval_samples = 64
memory_budget = 60
"""


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = parse_config_text(TINY)
    matrix = run_experiment(cfg, out)
    return cfg, out, matrix


class TestConfig:
    def test_defaults_reproduce_reference_values(self):
        cfg = ExperimentConfig()
        assert cfg.lambda_sc == 2.0 and cfg.lambda_kd == 1.0 and cfg.tau == 0.1
        assert cfg.batch_size == 64 and cfg.memory_budget == 500
        assert cfg.main_lr == 2e-4 and cfg.proj_lr == 5e-4
        assert cfg.epochs == 20

    def test_parse_round_trip(self):
        cfg = parse_config_text(TINY)
        again = parse_config_text("\n".join(config_lines(cfg)))
        assert cfg == again

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="unknown field"):
            parse_config_text("config_version = 1\nnot_a_field = 3\n")

    def test_bad_type(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_config_text("config_version = 1\nseed = banana\n")

    def test_missing_version(self):
        with pytest.raises(ConfigError, match="config_version"):
            parse_config_text("seed = 1\n")

    def test_validation_rules(self):
        cfg = ExperimentConfig(protocol="six-task")
        with pytest.raises(ConfigError, match="protocol"):
            validate_config(cfg)
        with pytest.raises(ConfigError, match="tau"):
            validate_config(ExperimentConfig(tau=0.0))

    def test_hash_changes_iff_any_field_changes(self):
        base = ExperimentConfig()
        assert config_hash(base) == config_hash(ExperimentConfig())
        for field, value in [("seed", 12), ("epochs", 21), ("use_sc", False),
                             ("lambda_sc", 1.5), ("head", "mlp")]:
            other = ExperimentConfig(**{field: value})
            assert config_hash(other) != config_hash(base), field


class TestRunArtifacts:
    def test_artifacts_exist(self, tiny_run):
        _, out, _ = tiny_run
        for name in ("config_resolved.txt", "scores.csv", "summary.json",
                     "memory_final.csv", "manifest.json"):
            assert (out / name).exists(), name

    def test_four_score_rows_af_from_row_two(self, tiny_run):
        _, out, matrix = tiny_run
        assert matrix.num_steps == 4
        summary = json.loads((out / "summary.json").read_text())
        assert summary["steps"][0]["af_acc"] is None
        assert all(summary["steps"][t]["af_acc"] is not None for t in (1, 2, 3))

    def test_scores_csv_round_trip(self, tiny_run):
        _, out, matrix = tiny_run
        back = parse_scores_csv((out / "scores.csv").read_text())
        assert back.acc_rows == matrix.acc_rows
        assert back.auc_rows == matrix.auc_rows

    def test_rerun_byte_identical(self, tiny_run, tmp_path):
        cfg, out, _ = tiny_run
        run_experiment(cfg, tmp_path / "again")
        assert (tmp_path / "again" / "scores.csv").read_bytes() == (out / "scores.csv").read_bytes()
        assert (tmp_path / "again" / "summary.json").read_bytes() == (out / "summary.json").read_bytes()

    def test_manifest_hashes_artifacts(self, tiny_run):
        _, out, _ = tiny_run
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "complete"
        assert "scores.csv" in manifest["artifacts"]
        assert manifest["config_hash"] == config_hash(tiny_run[0])


class TestReport:
    def test_report_matches_summary(self, tiny_run):
        _, out, _ = tiny_run
        text = report(out)
        summary = json.loads((out / "summary.json").read_text())
        for step in summary["steps"]:
            assert f"{step['aa_acc']:.2f}" in text

    def test_af_recomputed_from_csv_matches_json(self, tiny_run):
        _, out, _ = tiny_run
        matrix = parse_scores_csv((out / "scores.csv").read_text())
        summary = json.loads((out / "summary.json").read_text())
        for step in summary["steps"]:
            if step["af_acc"] is not None:
                assert average_forgetting(matrix, step["task"]) == pytest.approx(
                    step["af_acc"], abs=1e-9)

    def test_missing_artifacts_listed(self, tmp_path):
        with pytest.raises(ContractViolation, match="scores.csv"):
            report(tmp_path)


class TestCliVerbs:
    def test_run_and_verify(self, tmp_path):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(TINY)
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert main(["verify", "--dir", str(out)]) == 0

    def test_config_error_exit_code(self, tmp_path):
        cfg_path = tmp_path / "bad.txt"
        cfg_path.write_text("config_version = 1\nbogus = 1\n")
        assert main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 2

    def test_ablate_flag(self, tmp_path):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(TINY)
        out = tmp_path / "out"
        rc = main(["run", "--config", str(cfg_path), "--out", str(out), "--ablate", "sc,kdcp"])
        assert rc == 0
        resolved = (out / "config_resolved.txt").read_text()
        assert "use_sc = false" in resolved and "use_kdcp = false" in resolved
        assert "use_kd = true" in resolved

    def test_bad_ablate_component(self, tmp_path):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(TINY)
        assert main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "o"),
                     "--ablate", "banana"]) == 2

    def test_report_verb_missing_dir(self, tmp_path):
        assert main(["report", "--dir", str(tmp_path / "nope")]) == 3

    def test_dump_profile_verb(self, tmp_path):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(TINY)
        out = tmp_path / "profile.csv"
        assert main(["dump-profile", "--config", str(cfg_path), "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "x,value,task_count"
        assert all(line.endswith(",4") for line in lines[1:])


class TestEmbeddings:
    def test_row_count_matches_pooled_eval(self, tmp_path):
        cfg = parse_config_text(TINY)
        stream = gen_sequence(cfg.protocol, cfg.seed, train_n=cfg.train_samples,
                              eval_n=cfg.eval_samples)
        matrix, trainer = run_stream(stream, trainer_config(cfg), seed=cfg.seed)
        n = dump_embeddings(trainer, stream, tmp_path / "emb.csv")
        assert n == 4 * cfg.eval_samples
        lines = (tmp_path / "emb.csv").read_text().splitlines()
        assert len(lines) == n + 1

    def test_pca_isotropic_explained_variance(self):
        rng = RngStream(5)
        F = rng.normal(size=(6000, 16))
        _, ratios = pca_2d(F)
        assert ratios.sum() == pytest.approx(2.0 / 16.0, abs=0.03)

    def test_pca_duplicated_rows(self, rng):
        F = rng.normal(size=(40, 5))
        proj, _ = pca_2d(np.vstack([F, F]))
        assert np.allclose(proj[:40], proj[40:], atol=1e-12)

    def test_pca_needs_two_dims(self):
        with pytest.raises(ContractViolation):
            pca_2d(np.zeros((10, 1)))

    def test_pca_sign_convention(self, rng):
        F = rng.normal(size=(100, 4)) * np.array([3.0, 1.0, 0.5, 0.1])
        proj1, _ = pca_2d(F)
        proj2, _ = pca_2d(F.copy())
        assert np.array_equal(proj1, proj2)
