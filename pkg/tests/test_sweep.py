import hashlib
import shlex
import subprocess
import sys
from pathlib import Path
from unittest.mock import patch

import pytest

from envdpo.constants import EXIT_CHECK, repo_root
from envdpo.sweep import SweepRun, run_sweep, train_sweep_runs


class TestSweepRun:
    @patch.object(Path, Path.mkdir.__name__)
    def test___constructor(self, mkdir_mock):
        logdir = Path("logs")

        sweep_run = SweepRun("train_seed1", ["-q", "train", 7], Path("out"), logdir)

        expected_command = [sys.executable, "-m", "envdpo", "-q", "train", "7"]
        expected_hash = hashlib.sha256(shlex.join(expected_command).encode("utf-8")).hexdigest()
        assert sweep_run.command == expected_command
        assert sweep_run.command_as_str == shlex.join(expected_command)
        assert sweep_run.out_log == f"logs/train_seed1_{expected_hash}.out"
        assert sweep_run.err_log == f"logs/train_seed1_{expected_hash}.err"

        mkdir_mock.assert_called_once_with(parents=True, exist_ok=True)

    def test___run(self, tmp_path):
        logsdir = tmp_path / "logs"
        python_script = str(repo_root / "tests/helpers/run_test.py")
        sweep_run = SweepRun("helper", [], tmp_path, logsdir)
        sweep_run.command = [sys.executable, python_script]

        sweep_run.run()

        with open(sweep_run.out_log) as out_file_fh:
            assert out_file_fh.readlines() == ["out\n"]
        with open(sweep_run.err_log) as err_file_fh:
            assert err_file_fh.readlines() == [
                f"Command line: {shlex.join([sys.executable, python_script])}\n",
                "err\n",
            ]


class TestRunSweep:
    @patch.object(SweepRun, SweepRun._run_core.__name__)
    def test___all_points_run(self, run_core_mock, tmp_path):
        runs = [SweepRun(f"point{i}", [str(i)], tmp_path, tmp_path / "logs") for i in range(3)]

        run_sweep(runs, jobs=2)

        assert run_core_mock.call_count == 3
        called = sorted(call.args[0][-1] for call in run_core_mock.call_args_list)
        assert called == ["0", "1", "2"]

    @patch.object(
        SweepRun,
        SweepRun._run_core.__name__,
        side_effect=subprocess.CalledProcessError(1, "envdpo"),
    )
    def test___failure_exits_with_check_code(self, run_core_mock, tmp_path):
        runs = [SweepRun("broken", [], tmp_path, tmp_path / "logs")]

        with pytest.raises(SystemExit) as excinfo:
            run_sweep(runs)

        assert excinfo.value.code == EXIT_CHECK


class TestTrainSweepRuns:
    @patch.object(Path, Path.mkdir.__name__)
    def test___one_child_per_seed(self, mkdir_mock):
        runs = train_sweep_runs(
            seeds=(1, 2),
            data=Path("data"),
            outdir=Path("out"),
            config_file=Path("exp.yaml"),
            overrides=[("train.lambda", "0")],
            resume=True,
        )

        assert [run.name for run in runs] == ["train_seed1", "train_seed2"]
        assert runs[1].outdir == Path("out/seed_2")
        assert runs[1].command[3:] == [
            "-q",
            "train",
            "-d",
            "data",
            "-o",
            "out/seed_2",
            "--config",
            "exp.yaml",
            "--set",
            "train.lambda=0",
            "--set",
            "seed=2",
            "--set",
            "train.seed=2",
            "--resume",
        ]

    @patch.object(Path, Path.mkdir.__name__)
    def test___logs_shared_under_outdir(self, mkdir_mock):
        runs = train_sweep_runs((5,), Path("data"), Path("out"), None, [], dump_envs=True)

        assert runs[0].command[-1] == "--dump-envs"
        assert "--config" not in runs[0].command
        assert runs[0].out_log.startswith("out/logs/train_seed5_")
