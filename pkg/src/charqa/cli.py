"""Command-line pipeline driver.

Exit codes: 0 success, 1 validation error, 2 some tasks failed, 3 fatal.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from dataclasses import replace

import click

from .config import ConfigError, RunConfig
from .corpus import CorpusError
from .llm import BackendError
from .reward_service import ReferenceStore, StoreError, serve_reward
from .runner import (
    RunnerError,
    evaluate as evaluate_run,
    ingest as ingest_corpus,
    render_report,
    run as run_pipeline,
    run_significance,
)
from .strategies import ContextKind, ModeKind, StrategyError
from .trace import TraceError

log = logging.getLogger(__name__)

_VALIDATION_ERRORS = (ConfigError, CorpusError, RunnerError, StrategyError, StoreError, ValueError)


def _guarded(fn):
    """Map exceptions onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            code = fn(*args, **kwargs)
        except _VALIDATION_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        except (BackendError, TraceError, OSError) as exc:
            click.echo(f"fatal: {exc}", err=True)
            sys.exit(3)
        sys.exit(code or 0)

    return wrapper


def _load_config(config_path: str, seeds: str | None = None,
                 strategy: str | None = None, mode: str | None = None) -> RunConfig:
    config = RunConfig.from_file(config_path)
    if seeds:
        try:
            parsed = [int(part) for part in seeds.split(",") if part.strip()]
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers, got {seeds!r}") from None
        if not parsed:
            raise ConfigError("--seeds must name at least one seed")
        config.seeds = parsed
    if strategy:
        config.strategy = replace(config.strategy, kind=ContextKind.parse(strategy))
    if mode:
        config.mode = replace(config.mode, kind=ModeKind.parse(mode))
    return config


config_option = click.option(
    "--config", "config_path", required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="Run configuration file (YAML).",
)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose: bool) -> None:
    """Character description pipeline: ingest, run, score, evaluate, report."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@config_option
@_guarded
def ingest(config_path: str) -> int:
    """Validate the corpus and print its statistics."""
    config = _load_config(config_path)
    stats = ingest_corpus(config)
    click.echo(json.dumps({
        "num_books": stats.num_books,
        "num_samples": stats.num_samples,
        "avg_characters_per_book": round(stats.avg_characters_per_book, 2),
        "avg_input_words": round(stats.avg_input_words, 2),
        "avg_output_words": round(stats.avg_output_words, 2),
    }, indent=2, sort_keys=True))
    return 0


@main.command()
@config_option
@click.option("--seeds", help="Override seeds, e.g. 0,1,2,3.")
@click.option("--strategy", help="Override the context strategy kind.")
@click.option("--mode", help="Override the reasoning mode kind.")
@click.option("--force", is_flag=True, help="Redo tasks that already have outputs.")
@_guarded
def run(config_path: str, seeds: str | None, strategy: str | None,
        mode: str | None, force: bool) -> int:
    """Generate descriptions for every task and seed; resumes by default."""
    config = _load_config(config_path, seeds=seeds, strategy=strategy, mode=mode)
    result = run_pipeline(config, force=force)
    click.echo(
        f"{result.strategy}/{result.mode}: {len(result.completed)} completed, "
        f"{len(result.skipped)} skipped, {len(result.failed)} failed -> {result.run_dir}"
    )
    for key, error in sorted(result.failed.items()):
        click.echo(f"  failed {key}: {error}", err=True)
    return result.exit_code


@main.command("reward-serve")
@config_option
@click.option("--bind", help="Override host:port from the config.")
@_guarded
def reward_serve(config_path: str, bind: str | None) -> int:
    """Serve POST /score and GET /healthz for external trainers."""
    config = _load_config(config_path)
    if "judge" not in config.backends:
        raise ConfigError("reward-serve needs config.backends.judge")
    if config.reward.reference_store is None:
        raise ConfigError("reward-serve needs config.reward.reference_store")
    from .runner import build_backends

    judge = build_backends(config)["judge"]
    store = ReferenceStore.from_file(config.reward.reference_store)
    prompts = config.prompt_library()
    serve_reward(bind or config.reward.bind, judge, store, prompts)
    return 0


@main.command()
@config_option
@click.option("--seeds", help="Override seeds, e.g. 0,1,2,3.")
@click.option("--strategy", help="Override the context strategy kind.")
@click.option("--baseline", type=click.Path(exists=True, file_okay=False),
              help="Baseline run directory for significance daggers.")
@_guarded
def evaluate(config_path: str, seeds: str | None, strategy: str | None,
             baseline: str | None) -> int:
    """Score an existing run with the full metric suite."""
    config = _load_config(config_path, seeds=seeds, strategy=strategy)
    result = evaluate_run(config, baseline=baseline)
    mean = result.summary["mean"]
    click.echo(
        f"{result.strategy}: "
        + "  ".join(f"{name}={100 * mean[name]:.2f}" for name in
                    ("prisma", "qa", "nli", "entmention", "rouge_l"))
    )
    click.echo(
        f"{len(result.evaluated)} evaluated, {len(result.skipped)} skipped, "
        f"{len(result.failed)} failed -> {result.report_dir}"
    )
    for key, error in sorted(result.failed.items()):
        click.echo(f"  failed {key}: {error}", err=True)
    return result.exit_code


@main.command()
@config_option
@_guarded
def report(config_path: str) -> int:
    """Print the aggregate table over all evaluated strategies."""
    config = _load_config(config_path)
    click.echo(render_report(config))
    return 0


@main.command()
@config_option
@click.option("--baseline", required=True, type=click.Path(exists=True, file_okay=False),
              help="Baseline run directory to compare against.")
@_guarded
def significance(config_path: str, baseline: str) -> int:
    """Paired randomization test of this run against a baseline run."""
    config = _load_config(config_path)
    results = run_significance(config, baseline)
    for metric, entry in results.items():
        marker = " †" if entry["significant"] else ""
        click.echo(
            f"{metric}: p={entry['p_value']:.4f} "
            f"diff={entry['observed_diff']:.4f}{marker}"
        )
    return 0


if __name__ == "__main__":
    main()
