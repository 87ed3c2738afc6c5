import dataclasses
import functools
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Tuple

import click
import numpy as np
import pandas as pd
from loguru import logger

from envdpo import __version__
from envdpo.causal import ScmSpec, backdoor_check, random_scm, require, run_amplification
from envdpo.cli import Mutex, Override, SeedList
from envdpo.config import ExperimentConfig, load_experiment_config
from envdpo.errors import ConfigError, EnvdpoError, InputError
from envdpo.evalrec import (
    PARTITIONS,
    InteractionLog,
    backdoor_log_scores,
    metric_report,
    rank_from_scores,
    rank_items,
    report_rows,
    split,
)
from envdpo.model import PolicyParams
from envdpo.preference import load_batch, preference_accuracy, write_triples
from envdpo.sweep import run_sweep, train_sweep_runs
from envdpo.trainer import RunWriter, train
from envdpo.utils import read_json, substream, write_json
from envdpo.world import (
    World,
    contexts_for,
    env_shares,
    make_world,
    simulate_log,
    to_triples,
    world_scm,
)

log_fmt = (
    "[<green>{time:YYYY-MM-DD HH:mm:ss}</green>] <level>{level: <8}</level> | "
    "<level>{message}</level>"
)

SHIFTED = "shifted_test"


def setup_logging(verbose: bool, quiet: bool) -> None:
    log_lvl = "INFO"
    if verbose:
        log_lvl = "DEBUG"
    elif quiet:
        log_lvl = "ERROR"
    logger.remove()
    logger.add(sys.stderr, level=log_lvl, format=log_fmt)


@contextmanager
def exit_on_error(ctx: click.Context):
    """Turn library errors into one parsable stderr line and the matching exit code."""
    try:
        yield
    except EnvdpoError as err:
        fail(ctx, err)
    except OSError as err:
        fail(ctx, InputError(str(err)))


def fail(ctx: click.Context, err: EnvdpoError) -> None:
    message = " ".join(str(err).split())
    logger.error(message)
    click.echo(f"envdpo:{err.kind}-error: {message}", err=True)
    ctx.exit(err.exit_code)


def setup_outdir(outdir: Optional[Path], cfg: ExperimentConfig, command: str) -> Path:
    if outdir is None:
        outdir = cfg.output_root / command
    outdir.mkdir(exist_ok=True, parents=True)
    write_json(cfg.to_dict(), outdir / "config.json")
    return outdir


def common_opts(func):
    """Options shared by every subcommand. To add them to a subcommand, use the
    decorator `@common_opts`
    """

    @click.option(
        "-o",
        "--outdir",
        help="Directory to place output files [default: <output_root>/<command>]",
        type=click.Path(file_okay=False, writable=True, path_type=Path),
    )
    @click.option(
        "-c",
        "--config",
        "config_file",
        help="JSON or YAML file merged over the package defaults",
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
    )
    @click.option(
        "-s",
        "--set",
        "overrides",
        help="Override one config value, e.g. --set train.lambda=0. Repeatable",
        type=Override(),
        multiple=True,
    )
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        return func(*args, **kwargs)

    return wrapper


def load_world(data: Path) -> World:
    return World.from_dict(read_json(data / "world.json"))


def load_policy(run: Path) -> PolicyParams:
    return PolicyParams.from_dict(read_json(run / "policy.json")["policy"])


@click.group()
@click.help_option("--help", "-h")
@click.version_option(__version__, "--version", "-V")
@click.option(
    "-v",
    "--verbose",
    help="Turns on debug-level logger. ",
    is_flag=True,
    cls=Mutex,
    not_required_if=["quiet"],
)
@click.option(
    "-q",
    "--quiet",
    help="Turns off all logging except errors. ",
    is_flag=True,
    cls=Mutex,
    not_required_if=["verbose"],
)
def main_cli(verbose: bool, quiet: bool):
    setup_logging(verbose, quiet)
    logger.info(f"Welcome to envdpo version {__version__}")


@main_cli.command()
@click.help_option("-h", "--help")
@common_opts
@click.pass_context
def simulate(
    ctx: click.Context,
    outdir: Optional[Path],
    config_file: Optional[Path],
    overrides: Tuple[Tuple[str, str], ...],
):
    """Simulate a confounded interaction log and split it into partitions

    Writes <partition>.csv interactions and <partition>.jsonl preference triples for
    train, valid, iid_test and ood_test, plus the world, its users and a manifest.
    """
    with exit_on_error(ctx):
        cfg = load_experiment_config(config_file, overrides)
        outdir = setup_outdir(outdir, cfg, "simulate")
        world = make_world(cfg.world, cfg.seed)
        write_json(world.to_dict(), outdir / "world.json")
        world_scm(world).save(outdir / "scm.json")

        log, users = simulate_log(world, cfg.world.n_interactions, cfg.seed)
        users.to_csv(outdir / "users.csv", index=False)
        result = split(log, cfg.split, cfg.seed)
        action_count = world.spec.action_count
        for name in PARTITIONS:
            part = result.partitions[name]
            part.to_csv(outdir / f"{name}.csv")
            triples = to_triples(part, users, action_count, cfg.seed) if len(part) else None
            write_triples([] if triples is None else triples.triples(), outdir / f"{name}.jsonl")

        manifest = result.manifest()
        manifest["env_shares"] = env_shares(users)
        if cfg.world.shifted_interactions:
            shifted, shifted_users = simulate_log(
                world,
                cfg.world.shifted_interactions,
                cfg.seed,
                prior=cfg.world.ood_env_prior,
                stream=1,
            )
            shifted_users.to_csv(outdir / "shifted_users.csv", index=False)
            shifted.to_csv(outdir / f"{SHIFTED}.csv")
            write_triples(
                to_triples(shifted, shifted_users, action_count, cfg.seed).triples(),
                outdir / f"{SHIFTED}.jsonl",
            )
            manifest["counts"][SHIFTED] = len(shifted)
            manifest["shifted_env_shares"] = env_shares(shifted_users)
        write_json(manifest, outdir / "manifest.json")
        logger.info(f"Wrote partitions {manifest['counts']} to {outdir}")

    logger.success("Done")


@main_cli.command("train")
@click.help_option("-h", "--help")
@click.option(
    "-d",
    "--data",
    help="Output directory of `envdpo simulate`",
    required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
)
@click.option(
    "--seeds",
    help="Comma-separated seeds; each runs as its own process into <outdir>/seed_<s>",
    type=SeedList(),
)
@click.option(
    "-j",
    "--jobs",
    help="Number of sweep points to run at once",
    type=click.IntRange(min=1),
    default=1,
    show_default=True,
)
@click.option("--resume", is_flag=True, help="Continue from the latest checkpoint in OUTDIR")
@click.option("--dump-envs", is_flag=True, help="Write per-step soft assignments to envs.jsonl")
@click.option(
    "--plain-dpo",
    is_flag=True,
    help="Use the dedicated DPO step without environment discovery",
)
@common_opts
@click.pass_context
def train_cmd(
    ctx: click.Context,
    data: Path,
    seeds: Optional[Tuple[int, ...]],
    jobs: int,
    resume: bool,
    dump_envs: bool,
    plain_dpo: bool,
    outdir: Optional[Path],
    config_file: Optional[Path],
    overrides: Tuple[Tuple[str, str], ...],
):
    """Train a policy on the train.jsonl preference triples in DATA"""
    with exit_on_error(ctx):
        cfg = load_experiment_config(config_file, overrides)
        outdir = setup_outdir(outdir, cfg, "train")
        if seeds:
            if plain_dpo:
                raise ConfigError("--plain-dpo cannot be combined with --seeds")
            runs = train_sweep_runs(
                seeds, data, outdir, config_file, overrides, resume, dump_envs
            )
            write_json(
                {"seeds": list(seeds), "runs": [str(run.outdir) for run in runs]},
                outdir / "sweep.json",
            )
            run_sweep(runs, jobs, ctx)
        else:
            train_cfg = cfg.train
            if dump_envs:
                train_cfg = dataclasses.replace(train_cfg, dump_envs=True)
            world = load_world(data)
            dataset = load_batch(data / "train.jsonl")
            logger.info(
                f"Training {'dpo' if plain_dpo else train_cfg.method} on {len(dataset)} "
                f"triples"
            )
            result = train(
                dataset,
                world.spec,
                train_cfg,
                RunWriter(outdir, resume),
                resume=resume,
                plain=plain_dpo,
            )
            write_json(
                {"policy": result.policy.to_dict(), "extractor": result.extractor.to_dict()},
                outdir / "policy.json",
            )

    logger.success("Done")


@main_cli.command("eval")
@click.help_option("-h", "--help")
@click.option(
    "-d",
    "--data",
    help="Output directory of `envdpo simulate`",
    required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
)
@click.option(
    "-r",
    "--run",
    help="Output directory of `envdpo train`",
    required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
)
@click.option("--backdoor", is_flag=True, help="Rank with the backdoor-adjusted policy")
@click.option(
    "-p",
    "--partition",
    help="Partition to evaluate [default: eval.partition]",
    type=click.Choice(PARTITIONS + (SHIFTED,)),
)
@common_opts
@click.pass_context
def eval_cmd(
    ctx: click.Context,
    data: Path,
    run: Path,
    backdoor: bool,
    partition: Optional[str],
    outdir: Optional[Path],
    config_file: Optional[Path],
    overrides: Tuple[Tuple[str, str], ...],
):
    """Rank the whole item space for every interaction of a test partition"""
    with exit_on_error(ctx):
        cfg = load_experiment_config(config_file, overrides)
        partition = partition or cfg.eval.partition
        backdoor = backdoor or cfg.eval.backdoor
        outdir = setup_outdir(outdir, cfg, "eval")

        policy = load_policy(run)
        test_log = InteractionLog.read_csv(data / f"{partition}.csv")
        if len(test_log) == 0:
            raise InputError(f"partition {partition} in {data} is empty")
        users = pd.read_csv(data / ("shifted_users.csv" if partition == SHIFTED else "users.csv"))
        env, rest = contexts_for(test_log, users)
        targets = test_log.frame["item_id"].to_numpy()
        if backdoor:
            summary = read_json(run / "summary.json").get("env_summary")
            if not summary:
                raise ConfigError(f"{run} has no environment summary for backdoor ranking")
            scores = backdoor_log_scores(
                policy, rest, np.array(summary["env_centroids"]), np.array(summary["prior"])
            )
            lists = rank_from_scores(scores, targets)
        else:
            lists = rank_items(policy, env, rest, targets)

        report = metric_report(
            lists,
            InteractionLog.read_csv(data / "train.csv"),
            test_log.frame["timestamp"].to_numpy(),
            cfg.eval.ks,
            cfg.eval.groups,
            cfg.eval.time_buckets,
        )
        report["partition"] = partition
        report["backdoor"] = backdoor
        report["preference_accuracy"] = preference_accuracy(
            load_batch(data / f"{partition}.jsonl"), policy
        )
        write_json(report, outdir / "metrics.json")
        report_rows(report).to_csv(outdir / "metrics.csv", index=False)
        logger.info(
            ", ".join(f"{k}={v:.4f}" for k, v in report.items() if "@" in k)
        )

    logger.success("Done")


@main_cli.command()
@click.help_option("-h", "--help")
@common_opts
@click.pass_context
def prop1(
    ctx: click.Context,
    outdir: Optional[Path],
    config_file: Optional[Path],
    overrides: Tuple[Tuple[str, str], ...],
):
    """Track the spurious weight w_E under plain DPO on a biased dataset

    Writes trajectory.csv and bound.json. Exits with code 3 when the monotonicity,
    slope or generalization-bound check fails.
    """
    with exit_on_error(ctx):
        cfg = load_experiment_config(config_file, overrides)
        outdir = setup_outdir(outdir, cfg, "prop1")
        result = run_amplification(cfg.prop1)
        result.trajectory.to_csv(outdir / "trajectory.csv", index=False)
        write_json(result.summary(), outdir / "bound.json")
        require(
            result.passed,
            f"amplification checks failed: monotonicity {result.monotonicity}, "
            f"slope {result.slope_status}, bound holds {result.bound.holds}",
        )

    logger.success("Done")


@main_cli.command("backdoor-check")
@click.help_option("-h", "--help")
@click.option(
    "--scm",
    "scm_file",
    help="JSON description of the SCM to check [default: backdoor.source]",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
)
@common_opts
@click.pass_context
def backdoor_check_cmd(
    ctx: click.Context,
    scm_file: Optional[Path],
    outdir: Optional[Path],
    config_file: Optional[Path],
    overrides: Tuple[Tuple[str, str], ...],
):
    """Compare the backdoor estimate with exhaustive interventional enumeration"""
    with exit_on_error(ctx):
        cfg = load_experiment_config(config_file, overrides)
        outdir = setup_outdir(outdir, cfg, "backdoor-check")
        bd = cfg.backdoor
        if scm_file is not None:
            spec = ScmSpec.load(scm_file)
        elif bd.source == "world":
            spec = world_scm(make_world(cfg.world, cfg.seed))
        else:
            spec = random_scm(substream(cfg.seed, "scm"), bd.n_env, bd.n_x, bd.n_y)
        report = backdoor_check(spec, bd.n_samples, cfg.seed)
        write_json(report.to_dict(), outdir / "backdoor.json")
        if report.unconfounded:
            logger.info("The SCM is unconfounded: observational and interventional agree")
        require(
            report.exact_deviation <= bd.exact_tolerance,
            f"backdoor estimate with true tables deviates by {report.exact_deviation}",
        )
        require(
            report.sampled_deviation is None
            or report.sampled_deviation <= bd.sampled_tolerance,
            f"backdoor estimate from samples deviates by {report.sampled_deviation}",
        )

    logger.success("Done")


def main():
    main_cli()


if __name__ == "__main__":
    main()
