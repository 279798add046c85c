"""Structured QA reasoning traces: the pipeline's central data object.

A trace is an ordered list of typed question/explanation/answer items,
produced chunk by chunk and concatenated in chunk order. The text form is a
sequence of numbered tag blocks::

    Q1: <question>
    E1: <explanation>
    A1: <answer>
    T1: <type>

A chunk that yields no information is the literal sentinel ``None``.
Parsing is deliberately lenient: model output drifts, and dropped items
self-penalize through the reward, so malformed pieces produce warnings
rather than failures.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import TokenCounter, whitespace_token_counter
from .text import unique_unigram_pct

NONE_SENTINEL = "None"

ANSWER_WORD_LIMIT = 8  # soft: longer answers are kept but flagged


class TraceError(Exception):
    """Invalid trace structure or injection collision."""


class QuestionType(Enum):
    ROLE = "Role"
    RELATIONSHIP = "Relationship"
    PERSONALITY = "Personality"
    EVENT = "Event"
    OTHER = "Other"

    @classmethod
    def parse_label(cls, label: str) -> tuple["QuestionType", bool]:
        """Case-insensitive lookup; unknown labels map to OTHER (known=False)."""
        cleaned = label.strip().lower()
        for member in cls:
            if member.value.lower() == cleaned:
                return member, True
        return cls.OTHER, False


@dataclass
class QaItem:
    question: str
    explanation: str = ""
    answer: str = ""
    qtype: QuestionType = QuestionType.OTHER


@dataclass
class TraceFormat:
    """Which optional segments a trace carries (ablation switches)."""

    include_explanation: bool = True
    include_type: bool = True
    include_answer: bool = True


@dataclass(frozen=True)
class ProvenanceSpan:
    """Half-open item range [start, end) contributed by one chunk."""

    chunk_index: int
    start: int
    end: int
    sentinel: bool = False


@dataclass
class ReasoningTrace:
    items: list[QaItem] = field(default_factory=list)
    provenance: list[ProvenanceSpan] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def empty(cls) -> "ReasoningTrace":
        return cls()

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class ParsedFragment:
    """Result of parsing one chunk's model output."""

    items: list[QaItem] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    is_sentinel: bool = False

    @classmethod
    def sentinel(cls) -> "ParsedFragment":
        return cls(is_sentinel=True)


_TAG_RE = re.compile(r"(?<![A-Za-z0-9])([QEAT])(\d+)\s*:")


def parse_trace(raw: str, fmt: TraceFormat | None = None) -> ParsedFragment:
    """Parse model output into a trace fragment or the none-sentinel.

    Recognizes Q/E/A/T tags in any whitespace layout and groups them by
    number. An item needs a question, an answer when the format includes
    answers, and an explanation when the format includes explanations;
    anything missing drops the item with a warning. A missing or unknown
    type label falls back to OTHER with a warning. Never raises: fully
    unparseable output yields an empty fragment plus warnings.
    """
    fmt = fmt or TraceFormat()
    if raw.strip() == NONE_SENTINEL:
        return ParsedFragment.sentinel()

    matches = list(_TAG_RE.finditer(raw))
    if not matches:
        return ParsedFragment(warnings=["no trace tags found in output"])

    # fields[index][letter] = first captured value; order follows Q positions
    fields: dict[int, dict[str, str]] = {}
    order: list[int] = []
    warnings: list[str] = []
    for pos, match in enumerate(matches):
        letter, number = match.group(1), int(match.group(2))
        end = matches[pos + 1].start() if pos + 1 < len(matches) else len(raw)
        value = raw[match.end() : end].strip()
        if letter == "T" and value:
            # type labels are single words; trailing chatter is not part of them
            value = value.splitlines()[0].strip()
        slot = fields.setdefault(number, {})
        if letter in slot:
            warnings.append(f"duplicate tag {letter}{number}; keeping first")
            continue
        slot[letter] = value
        if letter == "Q":
            order.append(number)

    for number in sorted(set(fields) - set(order)):
        warnings.append(f"fields for item {number} without a Q{number} tag; dropped")

    items: list[QaItem] = []
    for number in order:
        slot = fields[number]
        question = slot.get("Q", "")
        if not question:
            warnings.append(f"item {number}: empty question; dropped")
            continue
        answer = slot.get("A", "") if fmt.include_answer else ""
        if fmt.include_answer and not answer:
            warnings.append(f"item {number}: missing answer; dropped")
            continue
        explanation = slot.get("E", "") if fmt.include_explanation else ""
        if fmt.include_explanation and not explanation:
            warnings.append(f"item {number}: missing explanation; dropped")
            continue
        qtype = QuestionType.OTHER
        if fmt.include_type:
            label = slot.get("T", "")
            if not label:
                warnings.append(f"item {number}: missing type; using Other")
            else:
                qtype, known = QuestionType.parse_label(label)
                if not known:
                    warnings.append(f"item {number}: unknown type '{label}'; using Other")
        if answer and len(answer.split()) > ANSWER_WORD_LIMIT:
            warnings.append(f"item {number}: answer longer than {ANSWER_WORD_LIMIT} words")
        items.append(QaItem(question=question, explanation=explanation, answer=answer, qtype=qtype))

    if not items and not warnings:
        warnings.append("no complete items parsed")
    return ParsedFragment(items=items, warnings=warnings)


def serialize_trace(trace: ReasoningTrace | Sequence[QaItem], fmt: TraceFormat | None = None) -> str:
    """Render items as numbered tag blocks, renumbered 1..n; empty traces
    serialize to the sentinel so that parse(serialize(t)) round-trips."""
    fmt = fmt or TraceFormat()
    items = trace.items if isinstance(trace, ReasoningTrace) else list(trace)
    if not items:
        return NONE_SENTINEL
    blocks: list[str] = []
    for i, item in enumerate(items, start=1):
        lines = [f"Q{i}: {item.question}"]
        if fmt.include_explanation:
            lines.append(f"E{i}: {item.explanation}")
        if fmt.include_answer:
            lines.append(f"A{i}: {item.answer}")
        if fmt.include_type:
            lines.append(f"T{i}: {item.qtype.value}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def concat_traces(fragments: Sequence[tuple[int, ParsedFragment]]) -> ReasoningTrace:
    """Concatenate chunk-level fragments in chunk order.

    Sentinels contribute zero items but keep a provenance entry so the
    per-chunk structure survives serialization. Chunk indices must be
    strictly increasing.
    """
    items: list[QaItem] = []
    provenance: list[ProvenanceSpan] = []
    warnings: list[str] = []
    last_index: int | None = None
    for chunk_index, fragment in fragments:
        if last_index is not None and chunk_index <= last_index:
            raise TraceError(
                f"chunk indices must be strictly increasing: {chunk_index} after {last_index}"
            )
        last_index = chunk_index
        start = len(items)
        if not fragment.is_sentinel:
            items.extend(fragment.items)
        provenance.append(
            ProvenanceSpan(
                chunk_index=chunk_index,
                start=start,
                end=len(items),
                sentinel=fragment.is_sentinel,
            )
        )
        warnings.extend(f"chunk {chunk_index}: {w}" for w in fragment.warnings)
    return ReasoningTrace(items=items, provenance=provenance, warnings=warnings)


def inject_trace(trace_text: str, open_marker: str = "<think>", close_marker: str = "</think>") -> str:
    """Wrap serialized trace text in thinking markers for assistant prefill.

    An empty trace_text produces an empty thinking block (the no-reasoning
    condition). The close marker must not occur inside the trace text, or the
    block would be truncated by the consuming model.
    """
    if not open_marker or not close_marker:
        raise TraceError("thinking markers must be non-empty")
    if close_marker in trace_text:
        raise TraceError(f"trace text contains the close marker {close_marker!r}")
    if not trace_text:
        return f"{open_marker}\n{close_marker}"
    return f"{open_marker}\n{trace_text}\n{close_marker}"


@dataclass
class TraceStats:
    num_qa: int
    tokens: int
    unique_unigram_pct: float


def trace_stats(
    trace: ReasoningTrace,
    counter: TokenCounter = whitespace_token_counter,
    fmt: TraceFormat | None = None,
) -> TraceStats:
    """Item count, token count of the serialized form, and unigram diversity."""
    serialized = serialize_trace(trace, fmt)
    pct = 0.0 if not trace.items else unique_unigram_pct(serialized)
    return TraceStats(num_qa=len(trace.items), tokens=counter(serialized), unique_unigram_pct=pct)


def _item_entry(item: QaItem) -> dict:
    return {"q": item.question, "e": item.explanation, "a": item.answer, "t": item.qtype.value}


def trace_to_record(task_id: str, trace: ReasoningTrace) -> dict:
    """Trace as a JSON-ready record with per-chunk item lists (null = sentinel)."""
    chunks = []
    for span in trace.provenance:
        if span.sentinel:
            chunks.append({"index": span.chunk_index, "items": None})
        else:
            chunks.append(
                {
                    "index": span.chunk_index,
                    "items": [_item_entry(item) for item in trace.items[span.start : span.end]],
                }
            )
    # items outside any provenance span (hand-built traces) still get stored
    covered = max((span.end for span in trace.provenance), default=0)
    if covered < len(trace.items):
        index = max((span.chunk_index for span in trace.provenance), default=-1) + 1
        chunks.append(
            {"index": index, "items": [_item_entry(item) for item in trace.items[covered:]]}
        )
    return {"task_id": task_id, "chunks": chunks, "warnings": list(trace.warnings)}


def trace_from_record(record: dict) -> tuple[str, ReasoningTrace]:
    fragments: list[tuple[int, ParsedFragment]] = []
    for chunk in record.get("chunks", []):
        index = int(chunk["index"])
        if chunk.get("items") is None:
            fragments.append((index, ParsedFragment.sentinel()))
        else:
            items = [
                QaItem(
                    question=entry["q"],
                    explanation=entry.get("e", ""),
                    answer=entry.get("a", ""),
                    qtype=QuestionType.parse_label(entry.get("t", "Other"))[0],
                )
                for entry in chunk["items"]
            ]
            fragments.append((index, ParsedFragment(items=items)))
    trace = concat_traces(fragments)
    trace.warnings = [str(w) for w in record.get("warnings", [])]
    return str(record["task_id"]), trace


def save_traces(path: str | Path, traces: Iterable[tuple[str, ReasoningTrace]]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for task_id, trace in traces:
            fh.write(json.dumps(trace_to_record(task_id, trace), sort_keys=True) + "\n")


def load_traces(path: str | Path) -> dict[str, ReasoningTrace]:
    result: dict[str, ReasoningTrace] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                task_id, trace = trace_from_record(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise TraceError(f"{path}:{lineno}: invalid trace record: {exc}") from exc
            result[task_id] = trace
    return result
