"""Pipeline execution: seeded runs, resumable per-task files, report assembly.

Layout under the configured output directory:

    manifest.json
    <strategy>/seed-<s>/descriptions/<task_id>.json
    <strategy>/seed-<s>/traces/<task_id>.json
    <strategy>/seed-<s>/errors/<task_id>.json
    <strategy>/warnings.log
    reports/<strategy>/seed-<s>.jsonl
    reports/<strategy>/summary.json
    reports/<strategy>/report.csv

A task is done when its description file exists, so re-running skips it and a
killed run resumes where it stopped. Description, trace, and report files
contain no timestamps; only the manifest does.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from . import __version__
from .config import RunConfig
from .corpus import Book, CharacterTask, CorpusError, CorpusStats, dataset_stats, load_books, load_tasks
from .llm import Backend, BackendError, make_backend
from .metrics import MetricBackends, SignificanceResult, metric_report, significance_test
from .reward import QaReference, RewardError, extract_reference_qa, reward_score
from .strategies import (
    StrategyBackends,
    StrategyError,
    generate_description,
    resolve_target_words,
)
from .trace import TraceError, trace_from_record, trace_stats, trace_to_record

log = logging.getLogger(__name__)

# Report column order used everywhere a table is emitted.
METRIC_COLUMNS = ("prisma", "qa", "nli", "entmention", "rouge_l")
SIGNIFICANCE_ALPHA = 0.05


class RunnerError(Exception):
    pass


def write_json_atomic(path: Path, payload: object) -> None:
    """Full file or nothing: a crash mid-write must not leave half a record."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(
        json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )
    os.replace(tmp, path)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def build_backends(
    config: RunConfig, overrides: Optional[dict[str, Backend]] = None
) -> dict[str, Backend]:
    """Backends from config, with injected instances taking precedence."""
    backends: dict[str, Backend] = {}
    for role, backend_config in config.backends.items():
        if overrides and role in overrides:
            continue
        backends[role] = make_backend(backend_config)
    if overrides:
        backends.update(overrides)
    return backends


def _load_corpus(config: RunConfig) -> tuple[dict[str, Book], list[CharacterTask]]:
    books = load_books(config.paths.books)
    tasks = load_tasks(config.paths.tasks, books=books)
    return {book.id: book for book in books}, tasks


def ingest(config: RunConfig) -> CorpusStats:
    """Load and validate the corpus, write its statistics into the run dir."""
    book_map, tasks = _load_corpus(config)
    stats = dataset_stats(list(book_map.values()), tasks)
    record = {
        "num_books": stats.num_books,
        "num_samples": stats.num_samples,
        "avg_characters_per_book": stats.avg_characters_per_book,
        "avg_input_words": stats.avg_input_words,
        "avg_output_words": stats.avg_output_words,
    }
    write_json_atomic(Path(config.paths.output_dir) / "ingest.json", record)
    return stats


# ---------------------------------------------------------------------------
# run

@dataclass
class RunResult:
    run_dir: Path
    strategy: str
    mode: str
    completed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 2 if self.failed else 0


def _seed_dir(config: RunConfig, seed: int) -> Path:
    return Path(config.paths.output_dir) / config.strategy.label / f"seed-{seed}"


def _task_target_words(config: RunConfig, task: CharacterTask) -> int:
    if task.target_words is not None:
        return task.target_words
    if config.target_words is not None:
        return config.target_words
    return resolve_target_words(task, config.corpus_style)


def _run_one(
    config: RunConfig,
    book: Book,
    task: CharacterTask,
    seed: int,
    strategy_backends: StrategyBackends,
    prompts,
    counter,
) -> None:
    seed_dir = _seed_dir(config, seed)
    settings = replace(config.generation, seed=seed)
    description = generate_description(
        book, task, config.strategy, config.mode, strategy_backends,
        prompts=prompts, counter=counter,
        target_words=_task_target_words(config, task), settings=settings,
    )
    trace_ref = None
    if description.trace is not None:
        trace_path = seed_dir / "traces" / f"{task.task_id}.json"
        write_json_atomic(trace_path, trace_to_record(task.task_id, description.trace))
        trace_ref = f"traces/{task.task_id}.json"
    record = {
        "task_id": task.task_id,
        "seed": seed,
        "strategy": description.strategy,
        "mode": description.mode,
        "text": description.text,
        "trace_ref": trace_ref,
        "stats": {
            "tokens": description.stats.tokens,
            "unique_unigram_pct": description.stats.unique_unigram_pct,
        },
        "warnings": description.warnings,
    }
    write_json_atomic(seed_dir / "descriptions" / f"{task.task_id}.json", record)
    error_path = seed_dir / "errors" / f"{task.task_id}.json"
    if error_path.exists():
        error_path.unlink()


def run(
    config: RunConfig,
    backends: Optional[dict[str, Backend]] = None,
    force: bool = False,
) -> RunResult:
    config.validate_for_run()
    book_map, tasks = _load_corpus(config)
    counter = config.counter()
    prompts = config.prompt_library()
    resolved = build_backends(config, backends)
    if "generator" not in resolved:
        raise RunnerError("no generator backend available")
    strategy_backends = StrategyBackends(
        generator=resolved["generator"], reasoner=resolved.get("reasoner")
    )
    result = RunResult(
        run_dir=Path(config.paths.output_dir),
        strategy=config.strategy.label,
        mode=config.mode.label,
    )

    jobs = [(seed, task) for seed in config.seeds for task in tasks]

    def do_job(job: tuple[int, CharacterTask]) -> tuple[str, str, str]:
        seed, task = job
        key = f"{config.strategy.label}/seed-{seed}/{task.task_id}"
        desc_path = _seed_dir(config, seed) / "descriptions" / f"{task.task_id}.json"
        if desc_path.exists() and not force:
            return key, "skipped", ""
        try:
            _run_one(config, book_map[task.book_id], task, seed, strategy_backends, prompts, counter)
            return key, "completed", ""
        except (BackendError, StrategyError, TraceError, CorpusError) as exc:
            write_json_atomic(
                _seed_dir(config, seed) / "errors" / f"{task.task_id}.json",
                {"task_id": task.task_id, "seed": seed, "error": str(exc)},
            )
            log.error("%s failed: %s", key, exc)
            return key, "failed", str(exc)

    if config.max_parallel_tasks > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=config.max_parallel_tasks) as pool:
            outcomes = list(pool.map(do_job, jobs))
    else:
        outcomes = [do_job(job) for job in jobs]

    for key, status, error in outcomes:
        if status == "completed":
            result.completed.append(key)
        elif status == "skipped":
            result.skipped.append(key)
        else:
            result.failed[key] = error

    _write_warning_log(config)
    _update_manifest(config, resolved, result)
    return result


def _write_warning_log(config: RunConfig) -> None:
    """Collect warnings from all description records of this strategy into one
    deterministic, sorted log file."""
    strategy_dir = Path(config.paths.output_dir) / config.strategy.label
    lines = []
    for desc_path in sorted(strategy_dir.glob("seed-*/descriptions/*.json")):
        record = json.loads(desc_path.read_text(encoding="utf-8"))
        for warning in record.get("warnings", []):
            lines.append(f"seed={record['seed']} task={record['task_id']}: {warning}")
    strategy_dir.mkdir(parents=True, exist_ok=True)
    (strategy_dir / "warnings.log").write_text(
        "".join(line + "\n" for line in sorted(lines)), encoding="utf-8"
    )


def _update_manifest(config: RunConfig, backends: dict[str, Backend], result: RunResult) -> None:
    path = Path(config.paths.output_dir) / "manifest.json"
    if path.exists():
        manifest = json.loads(path.read_text(encoding="utf-8"))
    else:
        manifest = {"created_at": _now(), "runs": []}
    manifest["config_hash"] = config.config_hash()
    manifest["package_version"] = __version__
    manifest["updated_at"] = _now()
    manifest.setdefault("backend_ids", {}).update(
        {role: backend.backend_id for role, backend in backends.items()}
    )
    manifest["runs"].append(
        {
            "timestamp": _now(),
            "strategy": result.strategy,
            "mode": result.mode,
            "seeds": list(config.seeds),
            "completed": len(result.completed),
            "skipped": len(result.skipped),
            "failed": len(result.failed),
        }
    )
    write_json_atomic(path, manifest)


# ---------------------------------------------------------------------------
# evaluate

@dataclass
class EvaluateResult:
    report_dir: Path
    strategy: str
    evaluated: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 2 if self.failed else 0


def _scalar_metrics(row: dict) -> dict[str, float]:
    return {
        "prisma": row["prisma"]["f1"],
        "qa": row["qa_f1"],
        "nli": row["nli"],
        "entmention": row["entmention"]["f"],
        "rouge_l": row["rouge_l"]["f"],
    }


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def _load_trace_for_record(seed_dir: Path, record: dict):
    if not record.get("trace_ref"):
        return None
    trace_path = seed_dir / record["trace_ref"]
    _, trace = trace_from_record(json.loads(trace_path.read_text(encoding="utf-8")))
    return trace


def evaluate(
    config: RunConfig,
    backends: Optional[dict[str, Backend]] = None,
    baseline: Optional[str | Path] = None,
) -> EvaluateResult:
    config.validate_for_evaluate()
    book_map, tasks = _load_corpus(config)
    task_map = {task.task_id: task for task in tasks}
    counter = config.counter()
    prompts = config.prompt_library()
    resolved = build_backends(config, backends)
    for role in ("judge", "checker", "answerer"):
        if role not in resolved:
            raise RunnerError(f"no {role} backend available")
    metric_backends = MetricBackends(
        extractor_judge=resolved["judge"],
        checker=resolved["checker"],
        answerer=resolved["answerer"],
    )

    strategy = config.strategy.label
    strategy_dir = Path(config.paths.output_dir) / strategy
    seed_dirs = sorted(
        (p for p in strategy_dir.glob("seed-*") if p.is_dir()),
        key=lambda p: int(p.name.split("-", 1)[1]),
    )
    if not seed_dirs:
        raise RunnerError(f"nothing to evaluate: no seed directories under {strategy_dir}")

    report_dir = Path(config.paths.output_dir) / "reports" / strategy
    result = EvaluateResult(report_dir=report_dir, strategy=strategy)
    reference_cache: dict[str, Optional[QaReference]] = {}

    def reference_for(task: CharacterTask, book: Book) -> Optional[QaReference]:
        if task.task_id not in reference_cache:
            try:
                reference_cache[task.task_id] = extract_reference_qa(
                    task.gold_description, resolved["judge"],
                    character=task.character, book_title=book.title,
                    task_id=task.task_id, prompts=prompts,
                )
            except RewardError as exc:
                log.warning("task %s: %s", task.task_id, exc)
                reference_cache[task.task_id] = None
        return reference_cache[task.task_id]

    per_seed_rows: dict[int, list[dict]] = {}
    for seed_dir in seed_dirs:
        seed = int(seed_dir.name.split("-", 1)[1])
        rows: list[dict] = []
        for desc_path in sorted((seed_dir / "descriptions").glob("*.json")):
            record = json.loads(desc_path.read_text(encoding="utf-8"))
            task_id = record["task_id"]
            key = f"seed-{seed}/{task_id}"
            task = task_map.get(task_id)
            if task is None:
                result.failed[key] = f"task {task_id!r} not present in the task file"
                continue
            if not task.gold_description:
                result.skipped.append(key)
                log.info("%s: no gold description; reference-based metrics skipped", key)
                continue
            book = book_map[task.book_id]
            try:
                reference = reference_for(task, book)
                report = metric_report(
                    task_id, record["text"], task.gold_description, book,
                    metric_backends, reference_qas=reference, prompts=prompts,
                    counter=counter, nli_chunk_tokens=config.evaluation.nli_chunk_tokens,
                )
                trace = _load_trace_for_record(seed_dir, record)
                trace_reward = None
                trace_stat = None
                warnings = list(report.warnings)
                if trace is not None:
                    stat = trace_stats(trace, counter, config.mode.trace_format)
                    trace_stat = {
                        "num_qa": stat.num_qa,
                        "tokens": stat.tokens,
                        "unique_unigram_pct": stat.unique_unigram_pct,
                    }
                    if reference is not None:
                        try:
                            score = reward_score(trace, reference, resolved["judge"], prompts=prompts)
                            trace_reward = {
                                "precision": score.precision,
                                "recall": score.recall,
                                "f1": score.f1,
                            }
                        except RewardError as exc:
                            warnings.append(f"trace not reward-scored: {exc}")
                row = {
                    "task_id": task_id,
                    "seed": seed,
                    "strategy": record.get("strategy", strategy),
                    "mode": record.get("mode", config.mode.label),
                    "prisma": {"p": report.prisma.p, "r": report.prisma.r, "f1": report.prisma.f},
                    "qa_f1": report.qa_f1,
                    "nli": report.nli,
                    "entmention": {
                        "p": report.entmention.p, "r": report.entmention.r, "f": report.entmention.f,
                    },
                    "rouge_l": {"p": report.rouge.p, "r": report.rouge.r, "f": report.rouge.f},
                    "stats": {
                        "tokens": report.stats.tokens,
                        "unique_unigram_pct": report.stats.unique_unigram_pct,
                    },
                    "trace_reward": trace_reward,
                    "trace_stats": trace_stat,
                    "warnings": warnings,
                }
                rows.append(row)
                result.evaluated.append(key)
            except (BackendError, RewardError, TraceError) as exc:
                result.failed[key] = str(exc)
                log.error("%s evaluation failed: %s", key, exc)
        rows.sort(key=lambda r: r["task_id"])
        per_seed_rows[seed] = rows
        report_dir.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(row, sort_keys=True, ensure_ascii=False) for row in rows]
        (report_dir / f"seed-{seed}.jsonl").write_text(
            "".join(line + "\n" for line in lines), encoding="utf-8"
        )

    per_seed_means = {
        seed: {
            column: _mean([_scalar_metrics(row)[column] for row in rows])
            for column in METRIC_COLUMNS
        }
        for seed, rows in per_seed_rows.items()
    }
    cross_mean = {
        column: _mean([means[column] for means in per_seed_means.values()])
        for column in METRIC_COLUMNS
    }

    significance = None
    if baseline is not None:
        significance = _significance_summary(
            _per_task_means(per_seed_rows),
            _per_task_means(_load_report_rows(Path(baseline))),
            config,
        )

    summary = {
        "strategy": strategy,
        "mode": config.mode.label,
        "seeds": sorted(per_seed_rows),
        "num_tasks": max((len(rows) for rows in per_seed_rows.values()), default=0),
        "per_seed": {str(seed): per_seed_means[seed] for seed in sorted(per_seed_means)},
        "mean": cross_mean,
        "significance": significance,
        "skipped": sorted(result.skipped),
        "failed": dict(sorted(result.failed.items())),
    }
    write_json_atomic(report_dir / "summary.json", summary)
    _write_csv(report_dir, strategy, per_seed_means, cross_mean)
    result.summary = summary
    return result


def _write_csv(
    report_dir: Path,
    strategy: str,
    per_seed_means: dict[int, dict[str, float]],
    cross_mean: dict[str, float],
) -> None:
    """Per-seed and mean rows, metric columns in report order, values x100."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["strategy", "seed", *METRIC_COLUMNS])
    for seed in sorted(per_seed_means):
        writer.writerow(
            [strategy, seed]
            + [f"{100 * per_seed_means[seed][c]:.2f}" for c in METRIC_COLUMNS]
        )
    writer.writerow([strategy, "mean"] + [f"{100 * cross_mean[c]:.2f}" for c in METRIC_COLUMNS])
    (report_dir / "report.csv").write_text(buffer.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------------------
# significance between runs

def _load_report_rows(run_dir: Path) -> dict[int, list[dict]]:
    """Per-seed report rows of the single strategy evaluated in run_dir."""
    reports_root = run_dir / "reports"
    strategy_dirs = sorted(p for p in reports_root.glob("*") if p.is_dir())
    if not strategy_dirs:
        raise RunnerError(f"no evaluation reports under {reports_root}")
    if len(strategy_dirs) > 1:
        raise RunnerError(
            f"{reports_root} holds reports for several strategies "
            f"({', '.join(p.name for p in strategy_dirs)}); point --baseline at a "
            "run directory with exactly one"
        )
    rows_by_seed: dict[int, list[dict]] = {}
    for path in sorted(strategy_dirs[0].glob("seed-*.jsonl")):
        seed = int(path.stem.split("-", 1)[1])
        rows_by_seed[seed] = [
            json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line
        ]
    if not rows_by_seed:
        raise RunnerError(f"no per-seed reports under {strategy_dirs[0]}")
    return rows_by_seed


def _per_task_means(rows_by_seed: dict[int, list[dict]]) -> dict[str, dict[str, float]]:
    """task_id -> metric -> mean over seeds."""
    collected: dict[str, dict[str, list[float]]] = {}
    for rows in rows_by_seed.values():
        for row in rows:
            bucket = collected.setdefault(
                row["task_id"], {column: [] for column in METRIC_COLUMNS}
            )
            for column, value in _scalar_metrics(row).items():
                bucket[column].append(value)
    return {
        task_id: {column: _mean(values) for column, values in buckets.items()}
        for task_id, buckets in collected.items()
    }


def _significance_summary(
    mine: dict[str, dict[str, float]],
    theirs: dict[str, dict[str, float]],
    config: RunConfig,
) -> dict[str, dict]:
    shared = sorted(set(mine) & set(theirs))
    if not shared:
        raise RunnerError("no overlapping tasks between run and baseline reports")
    out: dict[str, dict] = {}
    for column in METRIC_COLUMNS:
        scores_a = [mine[task_id][column] for task_id in shared]
        scores_b = [theirs[task_id][column] for task_id in shared]
        result = significance_test(
            scores_a, scores_b,
            n_permutations=config.significance.n_permutations,
            seed=config.significance.seed,
        )
        out[column] = {
            "p_value": result.p_value,
            "observed_diff": result.observed_diff,
            "n_permutations": result.n_permutations,
            "significant": result.p_value <= SIGNIFICANCE_ALPHA,
        }
    return out


def run_significance(config: RunConfig, baseline: str | Path) -> dict[str, dict]:
    """Compare this config's evaluated run against a baseline run directory."""
    mine = _per_task_means(_load_report_rows(Path(config.paths.output_dir)))
    theirs = _per_task_means(_load_report_rows(Path(baseline)))
    return _significance_summary(mine, theirs, config)


# ---------------------------------------------------------------------------
# report rendering

def render_report(config: RunConfig) -> str:
    """Text table over every strategy evaluated in the run directory, columns
    in report order, values x100, dagger on significant columns."""
    reports_root = Path(config.paths.output_dir) / "reports"
    summaries = []
    for summary_path in sorted(reports_root.glob("*/summary.json")):
        summaries.append(json.loads(summary_path.read_text(encoding="utf-8")))
    if not summaries:
        raise RunnerError(f"no evaluation reports under {reports_root}")

    header = ["strategy", "mode", "PRISMA", "QA", "NLI", "EntMent", "Rouge-L"]
    rows = [header]
    for summary in summaries:
        cells = [summary["strategy"], summary["mode"]]
        for column in METRIC_COLUMNS:
            value = f"{100 * summary['mean'][column]:.2f}"
            significance = summary.get("significance") or {}
            if significance.get(column, {}).get("significant"):
                value += "†"
            cells.append(value)
        rows.append(cells)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]

    aggregate = io.StringIO()
    writer = csv.writer(aggregate, lineterminator="\n")
    writer.writerow(["strategy", "mode", *METRIC_COLUMNS])
    for summary in summaries:
        writer.writerow(
            [summary["strategy"], summary["mode"]]
            + [f"{100 * summary['mean'][c]:.2f}" for c in METRIC_COLUMNS]
        )
    reports_root.mkdir(parents=True, exist_ok=True)
    (reports_root / "report.csv").write_text(aggregate.getvalue(), encoding="utf-8")
    return "\n".join(lines)
