import hashlib
import shlex
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import click
from loguru import logger

from envdpo.constants import EXIT_CHECK, LOG_DIR_NAME


class SweepRun:
    """One child `envdpo` process with its stdout/stderr captured to hashed log files."""

    def __init__(self, name: str, args: Sequence[str], outdir: Path, logdir: Path):
        self.name = name
        self.outdir = outdir
        self.command: List[str] = [sys.executable, "-m", "envdpo", *map(str, args)]
        logdir.mkdir(parents=True, exist_ok=True)
        command_hash = hashlib.sha256(self.command_as_str.encode("utf-8")).hexdigest()
        logfile_prefix: Path = logdir / f"{name}_{command_hash}"
        self.out_log = f"{logfile_prefix}.out"
        self.err_log = f"{logfile_prefix}.err"

    @property
    def command_as_str(self) -> str:
        return shlex.join(self.command)

    def run(self) -> None:
        with open(self.out_log, "w") as stdout_fh, open(self.err_log, "w") as stderr_fh:
            print(f"Command line: {self.command_as_str}", file=stderr_fh, flush=True)
            logger.info(f"Started {self.name}: {self.command_as_str}")
            self._run_core(self.command, stdout_fh=stdout_fh, stderr_fh=stderr_fh)
            logger.info(f"Finished {self.name}")

    @staticmethod
    def _run_core(command: List[str], stdout_fh, stderr_fh) -> None:
        subprocess.check_call(command, stdout=stdout_fh, stderr=stderr_fh)


def _attempt(run: SweepRun) -> Optional[subprocess.CalledProcessError]:
    try:
        run.run()
    except subprocess.CalledProcessError as error:
        return error
    return None


def run_sweep(
    runs: Sequence[SweepRun], jobs: int = 1, ctx: Optional[click.Context] = None
) -> None:
    """Run every point, at most `jobs` at a time; any failure exits with code 3."""
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        errors = list(pool.map(_attempt, runs))

    failed = [(run, error) for run, error in zip(runs, errors) if error is not None]
    for run, error in failed:
        logger.error(f"Error calling {run.command_as_str} (return code {error.returncode})")
        logger.error(f"Please check stdout log file: {run.out_log}")
        logger.error(f"Please check stderr log file: {run.err_log}")
    if failed:
        logger.error(f"{len(failed)} of {len(runs)} sweep points failed. Exiting...")
        if ctx:
            ctx.exit(EXIT_CHECK)
        else:
            sys.exit(EXIT_CHECK)


def train_sweep_runs(
    seeds: Sequence[int],
    data: Path,
    outdir: Path,
    config_file: Optional[Path],
    overrides: Sequence[Tuple[str, str]],
    resume: bool = False,
    dump_envs: bool = False,
) -> List[SweepRun]:
    """One `train` child per seed, writing into outdir/seed_<s>/."""
    runs = []
    for seed in seeds:
        args: List[str] = ["-q", "train", "-d", str(data), "-o", str(outdir / f"seed_{seed}")]
        if config_file is not None:
            args += ["--config", str(config_file)]
        for key, raw in overrides:
            args += ["--set", f"{key}={raw}"]
        args += ["--set", f"seed={seed}", "--set", f"train.seed={seed}"]
        if resume:
            args.append("--resume")
        if dump_envs:
            args.append("--dump-envs")
        runs.append(
            SweepRun(
                f"train_seed{seed}", args, outdir / f"seed_{seed}", outdir / LOG_DIR_NAME
            )
        )
    return runs
