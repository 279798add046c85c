"""Context construction and description generation.

Six ways of putting a book in front of the model (none, lead, BM25 retrieval,
mention filtering, hierarchical merge, incremental update) crossed with three
reasoning modes (no trace, the model's built-in thinking, an injected QA
trace). Each path ends in a `Description`.
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

from .corpus import Book, CharacterTask, Chunk, TokenCounter, chunk_book, chunk_text, whitespace_token_counter
from .llm import Backend, BackendError, GenerationRequest, generate_batch
from .prompts import PromptLibrary
from .text import TextStats, text_stats, word_tokens
from .trace import (
    ParsedFragment,
    ReasoningTrace,
    TraceFormat,
    concat_traces,
    inject_trace,
    parse_trace,
    serialize_trace,
)

log = logging.getLogger(__name__)

DEFAULT_CONTEXT_BUDGET = 32_000
DEFAULT_RETRIEVAL_CHUNK = 512
DEFAULT_PROCESS_CHUNK = 16_000
DEFAULT_TARGET_WORDS = 150
# Rounded average gold-description lengths for the two corpus styles.
TARGET_WORDS_BY_STYLE = {"bookworm": 89, "cross": 295}

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"


class StrategyError(Exception):
    pass


class ContextKind(Enum):
    NO_CONTEXT = "no_context"
    LEAD = "lead"
    BM25 = "bm25"
    MENTION = "mention"
    HIERARCHICAL = "hierarchical"
    INCREMENTAL = "incremental"

    @classmethod
    def parse(cls, name: str) -> "ContextKind":
        try:
            return cls(name.strip().lower().replace("-", "_"))
        except ValueError:
            raise StrategyError(
                f"unknown strategy {name!r}; expected one of "
                f"{', '.join(k.value for k in cls)}"
            ) from None


class ModeKind(Enum):
    NO_TRACE = "no_trace"
    BUILT_IN = "built_in"
    GUIDED_QA = "guided_qa"

    @classmethod
    def parse(cls, name: str) -> "ModeKind":
        try:
            return cls(name.strip().lower().replace("-", "_"))
        except ValueError:
            raise StrategyError(
                f"unknown reasoning mode {name!r}; expected one of "
                f"{', '.join(k.value for k in cls)}"
            ) from None


@dataclass
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75


@dataclass
class ContextSpec:
    kind: ContextKind
    context_budget_tokens: int = DEFAULT_CONTEXT_BUDGET
    retrieval_chunk_tokens: int = DEFAULT_RETRIEVAL_CHUNK
    process_chunk_tokens: int = DEFAULT_PROCESS_CHUNK
    bm25: Bm25Params = field(default_factory=Bm25Params)

    def validate(self) -> None:
        for name in ("context_budget_tokens", "retrieval_chunk_tokens", "process_chunk_tokens"):
            if getattr(self, name) < 1:
                raise StrategyError(f"{name} must be >= 1")
        if self.kind in (ContextKind.LEAD, ContextKind.BM25, ContextKind.MENTION):
            if self.context_budget_tokens < self.retrieval_chunk_tokens:
                raise StrategyError("context budget smaller than one retrieval chunk")

    @property
    def label(self) -> str:
        return self.kind.value


@dataclass
class ReasoningMode:
    kind: ModeKind
    trace_format: TraceFormat = field(default_factory=TraceFormat)
    think_open: str = THINK_OPEN
    think_close: str = THINK_CLOSE

    @property
    def label(self) -> str:
        return self.kind.value


@dataclass
class StrategyBackends:
    """generator writes descriptions; reasoner emits QA traces (guided mode only)."""

    generator: Backend
    reasoner: Optional[Backend] = None

    def require_reasoner(self) -> Backend:
        if self.reasoner is None:
            raise StrategyError("guided QA mode needs a reasoner backend")
        return self.reasoner


@dataclass
class Description:
    task_id: str
    text: str
    strategy: str
    mode: str
    trace: Optional[ReasoningTrace] = None
    stats: TextStats = field(default_factory=lambda: TextStats(0, 0.0))
    warnings: list[str] = field(default_factory=list)


def resolve_target_words(task: CharacterTask, corpus_style: str | None = None) -> int:
    if task.target_words is not None:
        return task.target_words
    if corpus_style:
        style = corpus_style.strip().lower()
        if style in TARGET_WORDS_BY_STYLE:
            return TARGET_WORDS_BY_STYLE[style]
    return DEFAULT_TARGET_WORDS


# ---------------------------------------------------------------------------
# BM25

@dataclass
class Bm25Stats:
    num_chunks: int
    avg_chunk_len: float
    doc_freq: dict[str, int]


def bm25_corpus_stats(chunk_terms: Sequence[Sequence[str]]) -> Bm25Stats:
    if not chunk_terms:
        raise StrategyError("BM25 needs at least one chunk")
    df: Counter[str] = Counter()
    for terms in chunk_terms:
        df.update(set(terms))
    total = sum(len(terms) for terms in chunk_terms)
    return Bm25Stats(
        num_chunks=len(chunk_terms),
        avg_chunk_len=total / len(chunk_terms),
        doc_freq=dict(df),
    )


def bm25_score(
    query_terms: Sequence[str],
    chunk_terms: Sequence[str],
    stats: Bm25Stats,
    params: Bm25Params | None = None,
) -> float:
    """Okapi score of one chunk; repeated query terms contribute repeatedly."""
    params = params or Bm25Params()
    tf = Counter(chunk_terms)
    n = len(chunk_terms)
    # Degenerate corpus of empty chunks: every score is 0 by convention.
    norm = n / stats.avg_chunk_len if stats.avg_chunk_len > 0 else 1.0
    score = 0.0
    for term in query_terms:
        f = tf.get(term, 0)
        if f == 0:
            continue
        df = stats.doc_freq.get(term, 0)
        idf = math.log((stats.num_chunks - df + 0.5) / (df + 0.5) + 1.0)
        score += idf * f * (params.k1 + 1.0) / (f + params.k1 * (1.0 - params.b + params.b * norm))
    return score


def rank_chunks_bm25(
    chunks: Sequence[Chunk],
    query: str,
    params: Bm25Params | None = None,
) -> list[tuple[Chunk, float]]:
    """Chunks with scores, best first; ties broken by document position."""
    terms_per_chunk = [word_tokens(c.text) for c in chunks]
    stats = bm25_corpus_stats(terms_per_chunk)
    query_terms = word_tokens(query)
    scored = [
        (chunk, bm25_score(query_terms, terms, stats, params))
        for chunk, terms in zip(chunks, terms_per_chunk)
    ]
    scored.sort(key=lambda pair: (-pair[1], pair[0].index))
    return scored


# ---------------------------------------------------------------------------
# Mention filtering

def character_aliases(name: str) -> list[str]:
    """Full name, its words with >= 3 letters, and possessive forms, deduplicated.

    Length is measured on letters only, so honorifics like "Mr." do not
    become standalone aliases that would match every chunk.
    """
    base = name.strip()
    candidates = []
    if base:
        candidates.append(base)
    for part in re.split(r"\s+", base):
        if sum(ch.isalpha() for ch in part) >= 3:
            candidates.append(part)
    candidates.extend([c + "'s" for c in candidates])
    seen: set[str] = set()
    out = []
    for alias in candidates:
        key = alias.lower()
        if key not in seen:
            seen.add(key)
            out.append(alias)
    return out


def mention_pattern(aliases: Sequence[str]) -> "re.Pattern[str]":
    if not aliases:
        raise StrategyError("no usable aliases for mention matching")
    alternation = "|".join(re.escape(a) for a in sorted(aliases, key=len, reverse=True))
    return re.compile(rf"(?<!\w)(?:{alternation})(?!\w)", re.IGNORECASE)


# ---------------------------------------------------------------------------
# Context selection

def _take_until_budget(chunks: Sequence[Chunk], budget: int) -> list[Chunk]:
    """Prefix of the sequence, stopping at the first chunk that overflows."""
    taken: list[Chunk] = []
    used = 0
    for chunk in chunks:
        if used + chunk.token_count > budget:
            break
        taken.append(chunk)
        used += chunk.token_count
    return taken


def _take_fitting(chunks: Sequence[Chunk], budget: int) -> list[Chunk]:
    """Every chunk that still fits the remaining budget, order preserved."""
    taken: list[Chunk] = []
    used = 0
    for chunk in chunks:
        if used + chunk.token_count <= budget:
            taken.append(chunk)
            used += chunk.token_count
    return taken


def build_context(
    book: Book,
    task: CharacterTask,
    spec: ContextSpec,
    counter: TokenCounter = whitespace_token_counter,
) -> list[Chunk]:
    """Select the chunks a single generation call will see, in document order."""
    spec.validate()
    if spec.kind is ContextKind.NO_CONTEXT:
        return []
    if spec.kind in (ContextKind.HIERARCHICAL, ContextKind.INCREMENTAL):
        raise StrategyError(f"{spec.kind.value} processes the whole book, not a selected context")
    if not book.text.strip():
        raise StrategyError(f"book {book.id} has no text to build a context from")
    chunks = chunk_book(book, spec.retrieval_chunk_tokens, counter)
    budget = spec.context_budget_tokens
    if spec.kind is ContextKind.LEAD:
        return _take_until_budget(chunks, budget)
    if spec.kind is ContextKind.BM25:
        ranked = rank_chunks_bm25(chunks, task.character, spec.bm25)
        selected = _take_until_budget([c for c, _ in ranked], budget)
        selected.sort(key=lambda c: c.index)
        return selected
    if spec.kind is ContextKind.MENTION:
        pattern = mention_pattern(character_aliases(task.character))
        matching = [c for c in chunks if pattern.search(c.text)]
        if not matching:
            log.warning("task %s: no chunk mentions %r", task.task_id, task.character)
        # Keep scanning past oversized chunks: an alias-bearing chunk is only
        # dropped once the budget truly has no room for it.
        return _take_fitting(matching, budget)
    raise StrategyError(f"unhandled context kind {spec.kind}")


def render_context(chunks: Sequence[Chunk]) -> str:
    return "\n\n".join(c.text.strip() for c in chunks)


# ---------------------------------------------------------------------------
# Trace generation

def guided_trace(
    task: CharacterTask,
    chunks: Sequence[Chunk],
    reasoner: Backend,
    fmt: TraceFormat,
    book_title: str = "",
    prompts: PromptLibrary | None = None,
    temperature: float = 0.4,
    seed: int | None = None,
) -> ReasoningTrace:
    """One reasoner call per chunk; failed chunks degrade to the None sentinel."""
    prompts = prompts or PromptLibrary()
    if not chunks:
        return ReasoningTrace.empty()
    requests = [
        GenerationRequest(
            messages=[("user", prompts.qa_generation_prompt(chunk.text, task.character, book_title, fmt))],
            temperature=temperature,
            seed=seed,
        )
        for chunk in chunks
    ]
    results = generate_batch(requests, reasoner)
    fragments: list[tuple[int, ParsedFragment]] = []
    for chunk, result in zip(chunks, results):
        if result.error is not None:
            frag = ParsedFragment.sentinel()
            frag.warnings.append(f"reasoner call failed: {result.error}")
            log.warning("task %s chunk %d: reasoner call failed: %s", task.task_id, chunk.index, result.error)
        else:
            frag = parse_trace(result.text, fmt)
        fragments.append((chunk.index, frag))
    return concat_traces(fragments)


def _thinking_prefix(mode: ReasoningMode, trace: Optional[ReasoningTrace]) -> Optional[str]:
    """Assistant prefill for the generation call, or None for built-in thinking."""
    if mode.kind is ModeKind.BUILT_IN:
        return None
    if mode.kind is ModeKind.GUIDED_QA and trace is not None and len(trace) > 0:
        body = serialize_trace(trace, mode.trace_format)
        return inject_trace(body, mode.think_open, mode.think_close)
    # No-trace mode, or a guided trace that collapsed to nothing: close the
    # thinking block immediately so the model answers directly.
    return inject_trace("", mode.think_open, mode.think_close)


def strip_thinking(text: str, open_marker: str = THINK_OPEN, close_marker: str = THINK_CLOSE) -> str:
    """Drop the first balanced thinking block; on unbalanced markers keep what
    follows the last opener."""
    start = text.find(open_marker)
    if start < 0:
        return text.strip()
    end = text.find(close_marker, start + len(open_marker))
    if end >= 0:
        return (text[:start] + text[end + len(close_marker):]).strip()
    last = text.rfind(open_marker)
    return text[last + len(open_marker):].strip()


# ---------------------------------------------------------------------------
# Description generation

def _run_generation(
    prompt: str,
    mode: ReasoningMode,
    backend: Backend,
    trace: Optional[ReasoningTrace],
    temperature: float,
    seed: int | None,
    max_new_tokens: int,
) -> str:
    request = GenerationRequest(
        messages=[("user", prompt)],
        temperature=temperature,
        seed=seed,
        max_new_tokens=max_new_tokens,
        assistant_prefix=_thinking_prefix(mode, trace),
    )
    result = backend.generate(request)
    text = result.text
    if mode.kind is ModeKind.BUILT_IN:
        text = strip_thinking(text, mode.think_open, mode.think_close)
    return text.strip()


@dataclass
class GenerationSettings:
    temperature: float = 0.4
    seed: int | None = None
    max_new_tokens: int = 1024


def describe(
    book: Book,
    task: CharacterTask,
    context_chunks: Sequence[Chunk],
    mode: ReasoningMode,
    backends: StrategyBackends,
    strategy_label: str,
    trace: Optional[ReasoningTrace] = None,
    prompts: PromptLibrary | None = None,
    counter: TokenCounter = whitespace_token_counter,
    target_words: int = DEFAULT_TARGET_WORDS,
    settings: GenerationSettings | None = None,
) -> Description:
    """Single-call generation over an already selected context."""
    prompts = prompts or PromptLibrary()
    settings = settings or GenerationSettings()
    prompt = prompts.description.format(
        context=render_context(context_chunks),
        character=task.character,
        book=book.title,
        length=target_words,
    )
    text = _run_generation(
        prompt, mode, backends.generator, trace,
        settings.temperature, settings.seed, settings.max_new_tokens,
    )
    if not text:
        raise StrategyError(f"task {task.task_id}: generator returned empty output")
    warnings = list(trace.warnings) if trace is not None else []
    return Description(
        task_id=task.task_id,
        text=text,
        strategy=strategy_label,
        mode=mode.label,
        trace=trace,
        stats=text_stats(text, counter),
        warnings=warnings,
    )


def hierarchical_describe(
    book: Book,
    task: CharacterTask,
    spec: ContextSpec,
    mode: ReasoningMode,
    backends: StrategyBackends,
    prompts: PromptLibrary | None = None,
    counter: TokenCounter = whitespace_token_counter,
    target_words: int = DEFAULT_TARGET_WORDS,
    settings: GenerationSettings | None = None,
) -> Description:
    """Describe per process chunk, then merge. The merge call never sees a
    trace: guided traces steer stage 1 only."""
    prompts = prompts or PromptLibrary()
    settings = settings or GenerationSettings()
    chunks = chunk_book(book, spec.process_chunk_tokens, counter)

    fragments: list[tuple[int, ParsedFragment]] = []
    per_chunk_trace: dict[int, ReasoningTrace] = {}
    if mode.kind is ModeKind.GUIDED_QA:
        reasoner = backends.require_reasoner()
        full = guided_trace(
            task, chunks, reasoner, mode.trace_format, book.title, prompts,
            settings.temperature, settings.seed,
        )
        # Regroup the combined trace chunk by chunk for stage-1 injection.
        for chunk in chunks:
            items = [full.items[s.start:s.end] for s in full.provenance if s.chunk_index == chunk.index]
            flat = [item for group in items for item in group]
            per_chunk_trace[chunk.index] = ReasoningTrace(items=flat)
        fragments = [(s.chunk_index, ParsedFragment(items=[], is_sentinel=s.sentinel)) for s in full.provenance]
        combined_trace: Optional[ReasoningTrace] = full
    else:
        combined_trace = None

    stage1_requests = []
    for chunk in chunks:
        prompt = prompts.description.format(
            context=chunk.text.strip(),
            character=task.character,
            book=book.title,
            length=target_words,
        )
        stage1_requests.append(
            GenerationRequest(
                messages=[("user", prompt)],
                temperature=settings.temperature,
                seed=settings.seed,
                max_new_tokens=settings.max_new_tokens,
                assistant_prefix=_thinking_prefix(mode, per_chunk_trace.get(chunk.index)),
            )
        )
    stage1_results = generate_batch(stage1_requests, backends.generator)

    warnings = list(combined_trace.warnings) if combined_trace is not None else []
    intermediates: list[str] = []
    for chunk, result in zip(chunks, stage1_results):
        if result.error is not None:
            warnings.append(f"chunk {chunk.index}: stage-1 call failed: {result.error}")
            log.warning("task %s chunk %d: stage-1 call failed: %s", task.task_id, chunk.index, result.error)
            continue
        text = result.text
        if mode.kind is ModeKind.BUILT_IN:
            text = strip_thinking(text, mode.think_open, mode.think_close)
        text = text.strip()
        if text:
            intermediates.append(text)
    if not intermediates:
        raise StrategyError(f"task {task.task_id}: every stage-1 call failed")

    merge_prompt = prompts.merge.format(
        descriptions="\n\n".join(intermediates),
        character=task.character,
        book=book.title,
        length=target_words,
    )
    merged = _run_generation(
        merge_prompt, mode, backends.generator, None,
        settings.temperature, settings.seed, settings.max_new_tokens,
    )
    if not merged:
        raise StrategyError(f"task {task.task_id}: merge call returned empty output")
    return Description(
        task_id=task.task_id,
        text=merged,
        strategy=ContextKind.HIERARCHICAL.value,
        mode=mode.label,
        trace=combined_trace,
        stats=text_stats(merged, counter),
        warnings=warnings,
    )


def incremental_describe(
    book: Book,
    task: CharacterTask,
    spec: ContextSpec,
    mode: ReasoningMode,
    backends: StrategyBackends,
    prompts: PromptLibrary | None = None,
    counter: TokenCounter = whitespace_token_counter,
    target_words: int = DEFAULT_TARGET_WORDS,
    settings: GenerationSettings | None = None,
) -> Description:
    """Update a running description chunk by chunk, strictly in order. A failed
    update keeps the previous description."""
    prompts = prompts or PromptLibrary()
    settings = settings or GenerationSettings()
    chunks = chunk_book(book, spec.process_chunk_tokens, counter)

    per_chunk_trace: dict[int, ReasoningTrace] = {}
    combined_trace: Optional[ReasoningTrace] = None
    if mode.kind is ModeKind.GUIDED_QA:
        reasoner = backends.require_reasoner()
        combined_trace = guided_trace(
            task, chunks, reasoner, mode.trace_format, book.title, prompts,
            settings.temperature, settings.seed,
        )
        for chunk in chunks:
            groups = [
                combined_trace.items[s.start:s.end]
                for s in combined_trace.provenance
                if s.chunk_index == chunk.index
            ]
            per_chunk_trace[chunk.index] = ReasoningTrace(
                items=[item for group in groups for item in group]
            )

    warnings = list(combined_trace.warnings) if combined_trace is not None else []
    current = ""
    for chunk in chunks:
        prompt = prompts.incremental.format(
            current=current,
            context=chunk.text.strip(),
            character=task.character,
            book=book.title,
            length=target_words,
        )
        try:
            updated = _run_generation(
                prompt, mode, backends.generator, per_chunk_trace.get(chunk.index),
                settings.temperature, settings.seed, settings.max_new_tokens,
            )
        except BackendError as exc:
            warnings.append(f"chunk {chunk.index}: update failed, keeping previous description: {exc}")
            log.warning("task %s chunk %d: update failed: %s", task.task_id, chunk.index, exc)
            continue
        if updated:
            current = updated
        else:
            warnings.append(f"chunk {chunk.index}: empty update, keeping previous description")
    if not current:
        raise StrategyError(f"task {task.task_id}: no incremental step produced a description")
    return Description(
        task_id=task.task_id,
        text=current,
        strategy=ContextKind.INCREMENTAL.value,
        mode=mode.label,
        trace=combined_trace,
        stats=text_stats(current, counter),
        warnings=warnings,
    )


def generate_description(
    book: Book,
    task: CharacterTask,
    spec: ContextSpec,
    mode: ReasoningMode,
    backends: StrategyBackends,
    prompts: PromptLibrary | None = None,
    counter: TokenCounter = whitespace_token_counter,
    target_words: int | None = None,
    settings: GenerationSettings | None = None,
) -> Description:
    """Dispatch on the context kind; the single entry point the runner uses."""
    spec.validate()
    words = target_words if target_words is not None else resolve_target_words(task)
    common = dict(
        prompts=prompts, counter=counter, target_words=words, settings=settings,
    )
    if spec.kind is ContextKind.HIERARCHICAL:
        return hierarchical_describe(book, task, spec, mode, backends, **common)
    if spec.kind is ContextKind.INCREMENTAL:
        return incremental_describe(book, task, spec, mode, backends, **common)

    context = build_context(book, task, spec, counter)
    trace: Optional[ReasoningTrace] = None
    if mode.kind is ModeKind.GUIDED_QA:
        if context:
            joined = render_context(context)
            trace_chunks = chunk_text(joined, spec.process_chunk_tokens, counter, book_id=book.id)
            s = settings or GenerationSettings()
            trace = guided_trace(
                task, trace_chunks, backends.require_reasoner(), mode.trace_format,
                book.title, prompts or PromptLibrary(), s.temperature, s.seed,
            )
        else:
            trace = ReasoningTrace.empty()
    return describe(
        book, task, context, mode, backends,
        strategy_label=spec.label, trace=trace, **common,
    )
