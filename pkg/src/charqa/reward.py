"""Trace reward: how well a generated QA trace matches reference QA pairs.

Precision asks how many generated pairs a judge can verify against the
reference; recall swaps the roles; F1 combines them. The reference side is
extracted from a gold description, so the whole signal needs no human labels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence, Union

from .llm import Backend, GenerationRequest, generate_batch
from .prompts import PromptLibrary
from .trace import ReasoningTrace, TraceFormat, parse_trace

log = logging.getLogger(__name__)

# References carry question/answer only, no explanations or type labels.
REFERENCE_FORMAT = TraceFormat(include_explanation=False, include_type=False, include_answer=True)

Evidence = Union[str, Sequence[tuple[str, str]]]


class RewardError(Exception):
    pass


@dataclass
class QaReference:
    items: list[tuple[str, str]] = field(default_factory=list)
    source_task_id: str = ""

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class RewardScore:
    precision: float
    recall: float
    f1: float
    verified_generated: int = 0
    verified_reference: int = 0


def _f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def render_evidence(evidence: Evidence) -> str:
    """QA pairs become one `Q: ... A: ...` line each; free text passes through."""
    if isinstance(evidence, str):
        return evidence
    return "\n".join(f"Q: {q} A: {a}" for q, a in evidence)


def parse_yes_no(text: str) -> bool | None:
    """Leading token of the reply, case-insensitive; None when neither word."""
    stripped = text.strip()
    if not stripped:
        return None
    token = stripped.split()[0].strip(".,:;!?\"'").lower()
    if token == "yes":
        return True
    if token == "no":
        return False
    return None


def _verify_request(
    question: str, answer: str, evidence_text: str, prompts: PromptLibrary
) -> GenerationRequest:
    prompt = prompts.verify.format(evidence=evidence_text, question=question, answer=answer)
    return GenerationRequest(messages=[("user", prompt)], temperature=0.0)


def verify(
    question: str,
    answer: str,
    evidence: Evidence,
    judge: Backend,
    prompts: PromptLibrary | None = None,
) -> bool:
    """Ask the judge whether the evidence supports answering the question that
    way. An unparseable reply counts as no."""
    prompts = prompts or PromptLibrary()
    evidence_text = render_evidence(evidence)
    if not evidence_text.strip():
        raise RewardError("verify needs non-empty evidence")
    result = judge.generate(_verify_request(question, answer, evidence_text, prompts))
    parsed = parse_yes_no(result.text)
    if parsed is None:
        log.warning("judge reply not parseable as yes/no: %.60r", result.text)
        return False
    return parsed


def extract_reference_qa(
    gold_description: str,
    judge: Backend,
    character: str = "",
    book_title: str = "",
    task_id: str = "",
    prompts: PromptLibrary | None = None,
) -> QaReference:
    """Distill a gold description into reference QA pairs via the judge."""
    prompts = prompts or PromptLibrary()
    if not gold_description.strip():
        raise RewardError("cannot extract reference QA from an empty description")
    prompt = prompts.reference_qa.format(
        description=gold_description, character=character, book=book_title
    )
    result = judge.generate(GenerationRequest(messages=[("user", prompt)], temperature=0.0))
    fragment = parse_trace(result.text, REFERENCE_FORMAT)
    for warning in fragment.warnings:
        log.warning("reference extraction (%s): %s", task_id or "ad hoc", warning)
    items = [(item.question, item.answer) for item in fragment.items]
    if not items:
        raise RewardError(
            f"no reference QA pairs could be extracted ({task_id or 'ad hoc'}); scoring is undefined"
        )
    return QaReference(items=items, source_task_id=task_id)


def reward_score(
    trace: ReasoningTrace,
    reference: QaReference,
    judge: Backend,
    prompts: PromptLibrary | None = None,
) -> RewardScore:
    """Two verification passes, both judged against the full opposite side."""
    prompts = prompts or PromptLibrary()
    if len(reference) == 0:
        raise RewardError("reward needs a non-empty reference")
    if len(trace) == 0:
        return RewardScore(0.0, 0.0, 0.0, 0, 0)
    if any(not item.answer.strip() for item in trace.items):
        raise RewardError("trace items without answers cannot be reward-scored")

    generated = [(item.question, item.answer) for item in trace.items]
    evidence_ref = render_evidence(reference.items)
    evidence_gen = render_evidence(generated)

    requests = [_verify_request(q, a, evidence_ref, prompts) for q, a in generated]
    requests += [_verify_request(q, a, evidence_gen, prompts) for q, a in reference.items]
    results = generate_batch(requests, judge)
    failures = [r.error for r in results if r.error is not None]
    if failures:
        raise RewardError(f"judge backend failure: {failures[0]}")

    verdicts = []
    for result in results:
        parsed = parse_yes_no(result.text)
        if parsed is None:
            log.warning("judge reply not parseable as yes/no: %.60r", result.text)
        verdicts.append(bool(parsed))
    verified_generated = sum(verdicts[: len(generated)])
    verified_reference = sum(verdicts[len(generated):])
    precision = verified_generated / len(generated)
    recall = verified_reference / len(reference)
    return RewardScore(
        precision=precision,
        recall=recall,
        f1=_f1(precision, recall),
        verified_generated=verified_generated,
        verified_reference=verified_reference,
    )
