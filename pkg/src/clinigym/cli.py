"""Command line interface for clinigym."""

from __future__ import annotations

import asyncio
import contextlib
import csv
import functools
import logging
import sys
from pathlib import Path
from typing import TYPE_CHECKING, Any

import click

from .bridge import serve_stdio, serve_tcp
from .config import EpisodeConfig, TrainerConfig, load_yaml_config
from .const import (
    DEFAULT_BRIDGE_HOST,
    DEFAULT_BRIDGE_PORT,
    DEFAULT_BRIDGE_TIMEOUT,
    LAB_EXPERIMENTS,
    VARIANTS,
)
from .domains import get_domain, list_domains
from .env import ClinicalEnv, score_trajectory
from .exceptions import ClinigymError, UsageError
from .knowledge import KnowledgeStore, default_store
from .lab import run_experiment
from .metrics import write_metrics_csv
from .micro_clinic import micro_clinic_suite
from .pathways import PATHWAYS, evaluate_pathway
from .policy import POLICY_KINDS, get_policy, run_episode
from .tasks import convert_mcqa_file, dump_tasks, load_tasks, load_tasks_report
from .tools import export_schema
from .trainer import Trainer, load_checkpoint, save_checkpoint
from .trajectory import read_trajectories, write_trajectories
from .utils import canonical_json, format_float

if TYPE_CHECKING:
    from collections.abc import Callable

_LOGGER = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
SCORE_COLUMNS = ("task_id", "r_acc", "r_proc", "r_safe", "r_fmt", "r_coh", "r_assert", "raw", "total", "correct")


def _handle_errors(func: Callable[..., Any]) -> Callable[..., Any]:
    """Turn package errors into click exits: usage errors exit 2, the rest 1."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except UsageError as err:
            raise click.UsageError(str(err)) from err
        except ClinigymError as err:
            raise click.ClickException(str(err)) from err

    return wrapper


def _store(index: str | None) -> KnowledgeStore:
    return KnowledgeStore.load(index) if index else default_store()


def _trainer_config(config_path: str | None, **overrides: Any) -> TrainerConfig:
    data = load_yaml_config(config_path) if config_path else {}
    data.update({key: value for key, value in overrides.items() if value is not None})
    return TrainerConfig.from_mapping(data)


@click.group()
@click.option("--log-level", type=click.Choice(LOG_LEVELS, case_sensitive=False), default="WARNING", show_default=True)
def cli(log_level: str) -> None:
    """Clinical agent gym: environment, rewards, toy trainer and dynamics lab."""
    logging.basicConfig(level=log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True, help="JSONL passages")
@click.option("--index", type=click.Path(dir_okay=False), required=True, help="Index file to write")
@_handle_errors
def ingest(corpus: str, index: str) -> None:
    """Build a knowledge index from a passage corpus."""
    store = KnowledgeStore()
    stats = store.ingest_jsonl(corpus)
    store.save(index)
    click.echo(
        f"Indexed {stats.passage_count} passages, {stats.distinct_terms} terms, "
        f"mean length {stats.average_doc_length:.1f}"
    )


@cli.group()
def tasks() -> None:
    """Validate, convert and generate task suites."""


@tasks.command("validate")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@_handle_errors
def tasks_validate(path: str) -> None:
    """Check every record of a task file; exits 1 when any is rejected."""
    report = load_tasks_report(path)
    for diagnostic in report.diagnostics:
        click.echo(f"{path}:{diagnostic.line}: {diagnostic.message}", err=True)
    click.echo(f"{len(report.tasks)} valid, {len(report.diagnostics)} rejected")
    if report.diagnostics:
        sys.exit(1)


@tasks.command("convert-mcqa")
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.argument("target", type=click.Path(dir_okay=False))
@_handle_errors
def tasks_convert_mcqa(source: str, target: str) -> None:
    """Convert multiple-choice question records into medical_qa tasks."""
    written, errors = convert_mcqa_file(source, target)
    for error in errors:
        click.echo(error, err=True)
    click.echo(f"Wrote {written} tasks to {target}, skipped {len(errors)}")


@tasks.command("gen-micro")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-n", "--count", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--options", type=click.IntRange(2, 5), default=4, show_default=True)
@click.option("--cue-reliability", type=click.FloatRange(0.0, 1.0), default=0.5, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_handle_errors
def tasks_gen_micro(seed: int, count: int, options: int, cue_reliability: float, out: str) -> None:
    """Generate a micro-clinic task suite."""
    suite = micro_clinic_suite(seed, count, options, cue_reliability)
    written = dump_tasks(out, (item.task for item in suite))
    click.echo(f"Wrote {written} micro-clinic tasks to {out}")


@cli.command()
@click.option("--tasks", "tasks_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--policy", "policy_kind", type=click.Choice(POLICY_KINDS), default="scripted", show_default=True)
@click.option("--replay", type=click.Path(exists=True, dir_okay=False), help="Trajectory log for the replay policy")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--max-turns", type=click.IntRange(min=1), default=None)
@click.option("--index", type=click.Path(exists=True, dir_okay=False), help="Knowledge index; default: desk corpus")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Trajectory JSONL to write")
@_handle_errors
def run(  # noqa: PLR0913
    tasks_path: str,
    policy_kind: str,
    replay: str | None,
    seed: int,
    max_turns: int | None,
    index: str | None,
    out: str,
) -> None:
    """Run a policy over a task suite and log the trajectories."""
    suite = load_tasks(tasks_path)
    policy = get_policy(policy_kind, path=replay)
    config = EpisodeConfig.from_mapping({"max_turns": max_turns} if max_turns else None)
    env = ClinicalEnv(config, _store(index))
    trajectories = []
    for position, task in enumerate(suite):
        outcome = run_episode(env, policy, task, seed, position)
        trajectories.append(outcome.trajectory)
        click.echo(
            f"{task.id}\t{outcome.trajectory.terminated_by}\t{len(outcome.trajectory.turns)} turns\t"
            f"total {format_float(outcome.reward.total)}"
        )
    write_trajectories(out, trajectories)


@cli.command()
@click.option("--trajectory", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--tasks", "tasks_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--index", type=click.Path(exists=True, dir_okay=False), help="Knowledge index; default: desk corpus")
@click.option("--out", type=click.Path(dir_okay=False), help="CSV file; stdout when omitted")
@click.option("--breakdown", type=click.Path(dir_okay=False), help="JSONL file for the full breakdowns")
@_handle_errors
def score(trajectory: str, tasks_path: str, index: str | None, out: str | None, breakdown: str | None) -> None:
    """Score logged trajectories against their tasks; pathway tasks also get per-phase scores in the breakdown."""
    by_id = {task.id: task for task in load_tasks(tasks_path)}
    store = _store(index)
    rows, documents = [], []
    for logged in read_trajectories(trajectory):
        task = by_id.get(logged.task_id)
        if task is None:
            _LOGGER.warning("No task %s in %s; trajectory skipped", logged.task_id, tasks_path)
            continue
        reward = score_trajectory(logged, task, store=store)
        values = reward.to_dict()
        rows.append(
            [logged.task_id]
            + ["" if values[name] is None else format_float(values[name]) for name in SCORE_COLUMNS[1:-1]]
            + [str(int(reward.correct))]
        )
        document = {"task_id": logged.task_id, **values}
        pathway = PATHWAYS.get(str(task.metadata.get("pathway", "")))
        if pathway is not None:
            document["pathway"] = evaluate_pathway(logged, pathway).to_dict()
        documents.append(canonical_json(document))

    target = Path(out).open("w", encoding="utf-8", newline="") if out else contextlib.nullcontext(sys.stdout)
    with target as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SCORE_COLUMNS)
        writer.writerows(rows)
    if breakdown:
        Path(breakdown).write_text("".join(f"{document}\n" for document in documents), encoding="utf-8")


@cli.command()
@click.option("--variant", type=click.Choice(VARIANTS), default=None, help="Default: full")
@click.option("--steps", type=click.IntRange(min=1), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--tasks", "tasks_path", type=click.Path(exists=True, dir_okay=False), help="Default: micro-clinic")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML trainer config")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Metrics CSV")
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Write the final state here")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), help="Continue from a checkpoint")
@_handle_errors
def train(  # noqa: PLR0913
    variant: str | None,
    steps: int | None,
    seed: int,
    tasks_path: str | None,
    config_path: str | None,
    out: str,
    checkpoint: str | None,
    resume: str | None,
) -> None:
    """Train the toy student and write per-step metrics."""
    config = _trainer_config(config_path, variant=variant, steps=steps)
    trainer = Trainer(config, seed, load_tasks(tasks_path) if tasks_path else None)
    if resume:
        trainer.restore(load_checkpoint(resume))
    remaining = config.steps - trainer.step
    if remaining < 1:
        msg = f"Checkpoint is at step {trainer.step}, nothing left of {config.steps} steps"
        raise UsageError(msg)
    rows = trainer.run(remaining)
    write_metrics_csv(out, rows)
    if checkpoint:
        save_checkpoint(checkpoint, trainer.checkpoint())
    final = rows[-1]
    click.echo(
        f"step {final.step}: validation accuracy {format_float(final.validation_accuracy)}, "
        f"reference KL {format_float(final.reference_kl)}, mean turns {format_float(final.mean_turns)}"
    )


@cli.command()
@click.argument("experiment", type=click.Choice(LAB_EXPERIMENTS))
@click.option("--seeds", type=click.IntRange(min=1), default=1, show_default=True, help="Seeds 0..N-1")
@click.option("--steps", type=click.IntRange(min=1), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML trainer config")
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default="lab", show_default=True)
@_handle_errors
def lab(  # noqa: PLR0913
    experiment: str, seeds: int, steps: int | None, config_path: str | None, workers: int, out: str
) -> None:
    """Run a training-dynamics experiment; exits 1 when a check fails."""
    config = _trainer_config(config_path, steps=steps)
    report = run_experiment(experiment, out, tuple(range(seeds)), config, workers)
    for name, value in report.summary.items():
        click.echo(f"{name}\t{format_float(value)}")
    for check in report.checks:
        click.echo(f"{'PASS' if check.passed else 'FAIL'}\t{check.name}\t{check.detail}")
    if not report.passed:
        sys.exit(1)


@cli.command()
@click.option("--tasks", "tasks_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--transport", type=click.Choice(("stdio", "tcp")), default="stdio", show_default=True)
@click.option("--host", default=DEFAULT_BRIDGE_HOST, show_default=True)
@click.option("--port", type=click.IntRange(1, 65535), default=DEFAULT_BRIDGE_PORT, show_default=True)
@click.option("--timeout", type=click.FloatRange(min=0.0, min_open=True), default=DEFAULT_BRIDGE_TIMEOUT)
@click.option("--require-logprobs", is_flag=True, help="Reject actions without token_logprobs")
@click.option("--max-turns", type=click.IntRange(min=1), default=None)
@click.option("--index", type=click.Path(exists=True, dir_okay=False), help="Knowledge index; default: desk corpus")
@_handle_errors
def serve(  # noqa: PLR0913
    tasks_path: str,
    transport: str,
    host: str,
    port: int,
    timeout: float,
    require_logprobs: bool,  # noqa: FBT001
    max_turns: int | None,
    index: str | None,
) -> None:
    """Let an external agent play the tasks over newline-delimited JSON."""
    suite = load_tasks(tasks_path)
    config = EpisodeConfig.from_mapping({"max_turns": max_turns} if max_turns else None)
    store = _store(index)
    if transport == "stdio":
        coroutine = serve_stdio(suite, config, store, timeout, require_logprobs=require_logprobs)
    else:
        coroutine = serve_tcp(suite, host, port, config, store, timeout, require_logprobs=require_logprobs)
    reports = asyncio.run(coroutine)
    aborted = sum(report.aborted for report in reports)
    _LOGGER.info("Served %s episodes, %s aborted", len(reports), aborted)


@cli.group()
def tools() -> None:
    """Inspect domain toolkits."""


@tools.command("schema")
@click.option("--domain", type=str, required=True, help="Registered domain name")
@_handle_errors
def tools_schema(domain: str) -> None:
    """Print the tool schema document of a domain."""
    if domain not in list_domains():
        msg = f"Unknown domain {domain!r}, expected one of {list_domains()}"
        raise UsageError(msg)
    click.echo(export_schema(get_domain(domain).toolkit))
