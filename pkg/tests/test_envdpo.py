"""Integration tests"""
import json
from pathlib import Path
from unittest.mock import MagicMock, patch

import pandas as pd
import pytest
from click.testing import CliRunner

from envdpo.constants import EXIT_CHECK, EXIT_CONFIG, EXIT_IO, OUTPUT_ROOT_ENV
from envdpo.envdpo import main_cli
from envdpo.sweep import SweepRun

SMALL_WORLD = [
    "--set",
    "world.n_interactions=600",
    "--set",
    "world.shifted_interactions=100",
]
SMALL_TRAIN = [
    "--set",
    "train.epochs=1",
    "--set",
    "train.iterations=1",
    "--set",
    "train.warmup_steps=2",
    "--set",
    "train.batch_size=32",
]
SMALL_BACKDOOR = [
    "--set",
    "backdoor.n_env=2",
    "--set",
    "backdoor.n_x=3",
    "--set",
    "backdoor.n_y=3",
]


@pytest.fixture(autouse=True)
def no_output_root_env(monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)


@pytest.fixture(scope="module")
def simulated(tmp_path_factory) -> Path:
    outdir = tmp_path_factory.mktemp("simulated")
    result = CliRunner().invoke(main_cli, ["simulate", "-o", str(outdir), *SMALL_WORLD])
    assert result.exit_code == 0, result.output
    return outdir


@pytest.fixture(scope="module")
def trained(simulated, tmp_path_factory) -> Path:
    outdir = tmp_path_factory.mktemp("trained")
    opts = ["train", "-d", str(simulated), "-o", str(outdir), *SMALL_TRAIN]
    result = CliRunner().invoke(main_cli, opts)
    assert result.exit_code == 0, result.output
    return outdir


def read(path: Path):
    with open(path) as fh:
        return json.load(fh)


class TestMainCli:
    def test_verbose_and_quiet___fails(self):
        result = CliRunner().invoke(main_cli, ["-v", "-q", "prop1"])
        assert result.exit_code == 2
        assert "mutually exclusive" in result.output

    def test_unknown_config_key___config_error(self, tmp_path):
        runner = CliRunner()
        with runner.isolated_filesystem(temp_dir=tmp_path):
            result = runner.invoke(main_cli, ["prop1", "--set", "prop1.stepz=3"])
            assert result.exit_code == EXIT_CONFIG
            assert "envdpo:config-error: unknown config key 'prop1.stepz'" in result.output

    def test_default_outdir_under_output_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
        result = CliRunner().invoke(main_cli, ["prop1", "--set", "prop1.steps=20"])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "root" / "prop1" / "trajectory.csv").is_file()
        assert read(tmp_path / "root" / "prop1" / "config.json")["prop1"]["steps"] == 20


class TestSimulate:
    def test_partitions_and_manifest(self, simulated):
        manifest = read(simulated / "manifest.json")
        counts = manifest["counts"]
        assert sum(counts[name] for name in ("train", "valid", "iid_test", "ood_test")) == 600
        assert counts["shifted_test"] == 100
        assert manifest["env_shares"][0] > manifest["shifted_env_shares"][0]
        for name in ("train", "valid", "iid_test", "ood_test", "shifted_test"):
            assert (simulated / f"{name}.csv").is_file()
            assert (simulated / f"{name}.jsonl").is_file()
        for name in ("world.json", "scm.json", "users.csv", "shifted_users.csv", "config.json"):
            assert (simulated / name).is_file()

    def test_triples_match_interactions(self, simulated):
        interactions = pd.read_csv(simulated / "train.csv")
        with open(simulated / "train.jsonl") as fh:
            triples = [json.loads(line) for line in fh if line.strip()]
        assert len(triples) == len(interactions)
        assert [t["y_w"] for t in triples] == interactions["item_id"].tolist()

    def test_same_seed___identical_files(self, simulated, tmp_path):
        result = CliRunner().invoke(main_cli, ["simulate", "-o", str(tmp_path), *SMALL_WORLD])
        assert result.exit_code == 0, result.output
        written = sorted(p.name for p in simulated.iterdir() if p.suffix in (".csv", ".jsonl"))
        assert len(written) == 12
        for name in written + ["world.json", "scm.json"]:
            assert (tmp_path / name).read_bytes() == (simulated / name).read_bytes()


class TestTrain:
    def test_outputs(self, trained):
        for name in ("policy.json", "records.jsonl", "summary.json", "config.json"):
            assert (trained / name).is_file()
        assert (trained / "checkpoints" / "latest.json").is_file()
        summary = read(trained / "summary.json")
        assert summary["method"] == "causal-dpo"
        assert summary["steps"] > 0

    def test_plain_dpo(self, simulated, tmp_path):
        opts = ["train", "-d", str(simulated), "-o", str(tmp_path), "--plain-dpo", *SMALL_TRAIN]
        result = CliRunner().invoke(main_cli, opts)
        assert result.exit_code == 0, result.output
        summary = read(tmp_path / "summary.json")
        assert summary["method"] == "dpo"
        assert summary["final_mmd_penalty"] is None

    def test_plain_dpo_with_seeds___config_error(self, simulated, tmp_path):
        opts = ["train", "-d", str(simulated), "-o", str(tmp_path), "--plain-dpo", "--seeds", "1,2"]
        result = CliRunner().invoke(main_cli, opts)
        assert result.exit_code == EXIT_CONFIG
        assert "envdpo:config-error" in result.output

    def test_data_without_world___io_error(self, tmp_path):
        runner = CliRunner()
        with runner.isolated_filesystem(temp_dir=tmp_path) as td:
            Path(td, "empty").mkdir()
            result = runner.invoke(main_cli, ["train", "-d", "empty", "-o", "out"])
            assert result.exit_code == EXIT_IO
            assert "envdpo:io-error" in result.output

    @patch.object(SweepRun, SweepRun._run_core.__name__)
    def test_seed_sweep___one_child_per_seed(self, run_core_mock, simulated, tmp_path):
        opts = ["train", "-d", str(simulated), "-o", str(tmp_path), "--seeds", "1,2", "-j", "2"]
        result = CliRunner().invoke(main_cli, opts)
        assert result.exit_code == 0, result.output
        assert run_core_mock.call_count == 2
        sweep = read(tmp_path / "sweep.json")
        assert sweep["seeds"] == [1, 2]
        assert sweep["runs"] == [str(tmp_path / "seed_1"), str(tmp_path / "seed_2")]


class TestEval:
    def test_metrics(self, simulated, trained, tmp_path):
        opts = ["eval", "-d", str(simulated), "-r", str(trained), "-o", str(tmp_path)]
        result = CliRunner().invoke(main_cli, opts)
        assert result.exit_code == 0, result.output
        metrics = read(tmp_path / "metrics.json")
        assert metrics["partition"] == "ood_test"
        assert metrics["backdoor"] is False
        for name in ("hr@10", "ndcg@10", "hr@20", "ndcg@20"):
            assert 0.0 <= metrics[name] <= 1.0
        assert len(metrics["groups"]["hr@10"]) == 5
        assert 0.0 <= metrics["preference_accuracy"] <= 1.0
        rows = pd.read_csv(tmp_path / "metrics.csv")
        assert set(rows["slice"]) == {"all", "groups", "time_buckets"}

    def test_backdoor_on_shifted_partition(self, simulated, trained, tmp_path):
        opts = [
            "eval",
            "-d",
            str(simulated),
            "-r",
            str(trained),
            "-o",
            str(tmp_path),
            "--backdoor",
            "-p",
            "shifted_test",
        ]
        result = CliRunner().invoke(main_cli, opts)
        assert result.exit_code == 0, result.output
        metrics = read(tmp_path / "metrics.json")
        assert metrics["backdoor"] is True
        assert metrics["n_queries"] == 100

    def test_run_without_policy___io_error(self, simulated, tmp_path):
        (tmp_path / "run").mkdir()
        opts = ["eval", "-d", str(simulated), "-r", str(tmp_path / "run"), "-o", str(tmp_path)]
        result = CliRunner().invoke(main_cli, opts)
        assert result.exit_code == EXIT_IO
        assert "envdpo:io-error" in result.output


class TestProp1:
    def test_outputs(self, tmp_path):
        opts = ["prop1", "-o", str(tmp_path), "--set", "prop1.steps=50"]
        result = CliRunner().invoke(main_cli, opts)
        assert result.exit_code == 0, result.output
        trajectory = pd.read_csv(tmp_path / "trajectory.csv")
        assert len(trajectory) == 51
        assert read(tmp_path / "bound.json")["status"] == "pass"

    @patch("envdpo.envdpo.run_amplification")
    def test_failed_check___check_exit_code(self, run_amplification_mock, tmp_path):
        failed = MagicMock(passed=False, monotonicity="fail", slope_status="pass")
        failed.summary.return_value = {"status": "fail"}
        run_amplification_mock.return_value = failed
        result = CliRunner().invoke(main_cli, ["prop1", "-o", str(tmp_path)])
        assert result.exit_code == EXIT_CHECK
        assert "envdpo:check-error: amplification checks failed" in result.output


class TestBackdoorCheck:
    def test_random_scm(self, tmp_path):
        opts = ["backdoor-check", "-o", str(tmp_path), *SMALL_BACKDOOR]
        result = CliRunner().invoke(main_cli, opts)
        assert result.exit_code == 0, result.output
        report = read(tmp_path / "backdoor.json")
        assert report["exact_deviation"] <= 1e-12
        assert report["sampled_deviation"] <= 0.02
        assert report["n_samples"] == 100_000

    def test_simulated_world_scm___confounded(self, simulated, tmp_path):
        opts = ["backdoor-check", "--scm", str(simulated / "scm.json"), "-o", str(tmp_path)]
        result = CliRunner().invoke(main_cli, opts)
        assert result.exit_code == 0, result.output
        report = read(tmp_path / "backdoor.json")
        assert report["unconfounded"] is False
        assert report["confounding_gap"] > 0.0
        assert report["exact_deviation"] <= 1e-12

    def test_tolerance_too_tight___check_error(self, tmp_path):
        opts = [
            "backdoor-check",
            "-o",
            str(tmp_path),
            *SMALL_BACKDOOR,
            "--set",
            "backdoor.sampled_tolerance=0.0",
        ]
        result = CliRunner().invoke(main_cli, opts)
        assert result.exit_code == EXIT_CHECK
        assert "envdpo:check-error: backdoor estimate from samples" in result.output
