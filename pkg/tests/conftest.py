"""Shared fixtures plus the acceptance-result summary hook."""

from __future__ import annotations

import json
import re
from pathlib import Path

import pytest

from charqa.llm import CallableBackend


# ---------------------------------------------------------------------------
# Acceptance summary: one unambiguous line per criterion at the end of the run.

_ACCEPTANCE_RESULTS: dict[str, str] = {}
_CRITERION_RE = re.compile(r"test_criterion_(\d+)")


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    if report.when == "call":
        _ACCEPTANCE_RESULTS[report.nodeid] = report.outcome
    elif report.when == "setup" and report.outcome != "passed":
        _ACCEPTANCE_RESULTS[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return

    def criterion_number(nodeid: str) -> int:
        match = _CRITERION_RE.search(nodeid)
        return int(match.group(1)) if match else 99

    terminalreporter.write_sep("-", "acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE_RESULTS, key=criterion_number):
        outcome = _ACCEPTANCE_RESULTS[nodeid]
        label = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(outcome, outcome.upper())
        name = nodeid.split("::", 1)[1]
        terminalreporter.write_line(f"{name}: {label}")


# ---------------------------------------------------------------------------
# Scripted judges

def parse_verify_prompt(text: str) -> tuple[str, str, str]:
    """(question, answer, evidence) from a rendered verification prompt."""
    head, _, tail = text.partition("\n\nQuestion: ")
    evidence = head.split("Evidence:\n", 1)[1]
    question, _, rest = tail.partition("\nProposed answer: ")
    answer = rest.split("\n\n", 1)[0]
    return question, answer, evidence


def exact_match_judge() -> CallableBackend:
    """Says yes exactly when the asked (question, answer) pair is an evidence line."""

    def fn(request):
        question, answer, evidence = parse_verify_prompt(request.messages[-1][1])
        line = f"Q: {question} A: {answer}"
        return "yes" if line in evidence.splitlines() else "no"

    return CallableBackend(fn, backend_id="exact-match-judge")


def verdict_judge(verdicts: dict[tuple[str, str], bool]) -> CallableBackend:
    """Answers from a canned (question, answer) -> bool table, ignoring evidence."""

    def fn(request):
        question, answer, _ = parse_verify_prompt(request.messages[-1][1])
        return "yes" if verdicts.get((question, answer), False) else "no"

    return CallableBackend(fn, backend_id="verdict-judge")


@pytest.fixture
def rule_judge():
    return exact_match_judge()


# ---------------------------------------------------------------------------
# Corpus file helpers

def write_jsonl(path: Path, records) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


@pytest.fixture
def jsonl(tmp_path):
    def make(name: str, records) -> Path:
        return write_jsonl(tmp_path / name, records)

    return make


# ---------------------------------------------------------------------------
# Full pipeline workspace: corpus, scripted backends, and a run config whose
# generator reproduces each gold description exactly, so reference-based
# metrics hit 1.0 and any drift is visible.

GOLD_AL = "Al is a sailor who leads a loyal crew."
GOLD_BEA = "Bea is a healer who tends the village."

AL_QA = (
    "Q1: Who is Al?\nE1: The story follows his voyages at sea.\n"
    "A1: A sailor.\nT1: Role"
)
BEA_QA = (
    "Q1: Who is Bea?\nE1: She cares for the sick villagers.\n"
    "A1: A healer.\nT1: Role"
)

BOOK_AL = (
    "Al sailed across the cold grey sea at dawn. "
    "The loyal crew trusted Al with every rope and sail. "
    "Storms came often and the waves climbed high over the deck. "
    "Nothing broke the calm routine of watch and supper below. "
    "When the fog lifted Al charted a course for home port. "
    "Gulls followed the mast for three long days and nights."
)
BOOK_BEA = (
    "Bea gathered herbs along the river before first light. "
    "The village brought its sick and weary to Bea for care. "
    "Seasons turned and the harvest kept everyone busy in the fields. "
    "A quiet winter passed with snow deep around every door. "
    "Bea kept the fire warm and the kettle always full."
)


def pipeline_workspace(root: Path, strategy="lead", mode="no_trace", seeds=(0,), **extra):
    """Write corpus, mock scripts, and run.yaml under root; return config path."""
    import yaml

    root.mkdir(parents=True, exist_ok=True)
    write_jsonl(root / "books.jsonl", [
        {"id": "b1", "title": "Sea Tales", "text": BOOK_AL},
        {"id": "b2", "title": "River Home", "text": BOOK_BEA},
    ])
    write_jsonl(root / "tasks.jsonl", [
        {"task_id": "t1", "book_id": "b1", "character": "Al", "gold_description": GOLD_AL},
        {"task_id": "t2", "book_id": "b1", "character": "Cap"},
        {"task_id": "t3", "book_id": "b2", "character": "Bea", "gold_description": GOLD_BEA},
    ])

    scripts = {
        "generator": [
            ("Describe character Al", GOLD_AL),
            ("Intermediate descriptions of character Al", GOLD_AL),
            ("Current description of character Al", GOLD_AL),
            ("Describe character Bea", GOLD_BEA),
            ("Intermediate descriptions of character Bea", GOLD_BEA),
            ("Current description of character Bea", GOLD_BEA),
            ("Describe character Cap", "Cap stands watch at night."),
            ("Intermediate descriptions of character Cap", "Cap stands watch at night."),
            ("Current description of character Cap", "Cap stands watch at night."),
        ],
        "reasoner": [
            ("character: Al", AL_QA),
            ("character: Bea", BEA_QA),
            ("*", "None"),
        ],
        "judge": [
            ("Description of character Al", "Q1: Who leads the loyal crew? A1: Al"),
            ("Description of character Bea", "Q1: Who tends the village? A1: Bea"),
            ("can the question be answered", "yes"),
            ("Al is a sailor", "Al leads a loyal crew."),
            ("Bea is a healer", "Bea tends the village."),
        ],
        "checker": [("*", "1.0")],
        "answerer": [
            ("Who leads the loyal crew?", "Al"),
            ("Who tends the village?", "Bea"),
            ("*", "unanswerable"),
        ],
    }
    mocks_dir = root / "mocks"
    mocks_dir.mkdir(exist_ok=True)
    for role, rules in scripts.items():
        payload = [{"pattern": p, "response": r} for p, r in rules]
        (mocks_dir / f"{role}.yaml").write_text(yaml.safe_dump(payload, sort_keys=False))

    config = {
        "paths": {"books": "books.jsonl", "tasks": "tasks.jsonl", "output_dir": "out"},
        "strategy": {
            "kind": strategy,
            "context_budget_tokens": 64,
            "retrieval_chunk_tokens": 16,
            "process_chunk_tokens": 32,
        },
        "mode": {"kind": mode},
        "backends": {
            role: {"kind": "mock", "model_name": role, "script_path": f"mocks/{role}.yaml"}
            for role in scripts
        },
        "seeds": list(seeds),
        "significance": {"n_permutations": 200, "seed": 0},
    }
    config.update(extra)
    path = root / "run.yaml"
    path.write_text(yaml.safe_dump(config, sort_keys=False))
    return path


@pytest.fixture
def workspace(tmp_path):
    def make(name="ws", **kwargs):
        return pipeline_workspace(tmp_path / name, **kwargs)

    return make
