"""Evaluation of generated character descriptions.

Five metric families: fact-level precision/recall with judge entailment,
NLI grounding against the source book, QA answerability, entity-mention
overlap, and Rouge-L. Plus lexical stats and a paired randomization test.
"""

from __future__ import annotations

import logging
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .corpus import Book, TokenCounter, chunk_text, whitespace_token_counter
from .llm import Backend, BackendError, GenerationRequest, generate_batch
from .prompts import PromptLibrary
from .reward import QaReference
from .text import TextStats, text_stats, word_tokens

log = logging.getLogger(__name__)

ENTAILMENT_THRESHOLD = 0.5
NLI_CHUNK_TOKENS = 1024
ABSTAIN_TOKEN = "unanswerable"


@dataclass
class PRF:
    p: float
    r: float
    f: float


def _harmonic(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


# ---------------------------------------------------------------------------
# Rouge-L

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    # Rolling single row keeps memory linear in the shorter sequence.
    if len(b) > len(a):
        a, b = b, a
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(candidate: str, reference: str) -> PRF:
    """LCS overlap over lowercased alphanumeric tokens of the whole texts."""
    cand = word_tokens(candidate)
    ref = word_tokens(reference)
    length = lcs_length(cand, ref)
    p = length / len(cand) if cand else 0.0
    r = length / len(ref) if ref else 0.0
    return PRF(p, r, _harmonic(p, r))


# ---------------------------------------------------------------------------
# Entity mentions

# Words that only carry a capital because they open a sentence.
_SENTENCE_INITIAL_STOPLIST = frozenset("""
    a an the he she it they we i you his her its their our my your this that
    these those there then thus when while after before but and or nor so yet
    however although though moreover meanwhile eventually finally ultimately
    throughout later soon once now here what who whom whose how why where
    if because since during despite unless until as is are was were be being
    been has have had do does did not no yes one two at by for from in into
    of on to with without over under
""".split())

_ENTITY_TOKEN_RE = re.compile(r"[A-Za-z][A-Za-z'’-]*")
_SENTENCE_END_RE = re.compile(r"[.!?][\"'”’)\]]*\s+")


def _sentence_start_offsets(text: str) -> set[int]:
    starts = {0}
    for match in _SENTENCE_END_RE.finditer(text):
        starts.add(match.end())
    return starts


def _normalize_entity_token(token: str) -> str:
    lowered = token.lower()
    for suffix in ("'s", "’s"):
        if lowered.endswith(suffix):
            return lowered[: -len(suffix)]
    return lowered


def extract_entities(text: str) -> set[str]:
    """Maximal runs of capitalized tokens, dropping a sentence-initial token
    when its capital is merely positional."""
    starts = _sentence_start_offsets(text)
    tokens = list(_ENTITY_TOKEN_RE.finditer(text))
    entities: set[str] = set()
    run: list[re.Match] = []

    def flush(current: list[re.Match]) -> None:
        if current and current[0].start() in starts:
            first = _normalize_entity_token(current[0].group())
            if first in _SENTENCE_INITIAL_STOPLIST:
                current = current[1:]
        if current:
            entities.add(" ".join(_normalize_entity_token(m.group()) for m in current))

    for match in tokens:
        capitalized = match.group()[0].isupper()
        adjacent = bool(run) and text[run[-1].end():match.start()].strip() == ""
        if capitalized and (not run or adjacent):
            run.append(match)
            continue
        flush(run)
        run = [match] if capitalized else []
    flush(run)
    return entities


EntityExtractor = Callable[[str], "set[str]"]


def entity_mention_f1(
    candidate: str, reference: str, extractor: EntityExtractor = extract_entities
) -> PRF:
    cand = {e.lower() for e in extractor(candidate)}
    ref = {e.lower() for e in extractor(reference)}
    overlap = len(cand & ref)
    p = overlap / len(cand) if cand else 0.0
    r = overlap / len(ref) if ref else 0.0
    return PRF(p, r, _harmonic(p, r))


# ---------------------------------------------------------------------------
# Judge-backed fact metrics

class MetricError(Exception):
    pass


@dataclass
class FactSet:
    facts: list[str]
    source: str = "generated"

    def __len__(self) -> int:
        return len(self.facts)


_BULLET_RE = re.compile(r"^\s*(?:[-*•]\s+|\d+[.)]\s+)?")
_NUMBER_RE = re.compile(r"[-+]?\d*\.?\d+")


def extract_facts(
    description: str,
    extractor_judge: Backend,
    prompts: PromptLibrary | None = None,
    source: str = "generated",
) -> FactSet:
    """One judge call; each non-empty response line is a fact."""
    prompts = prompts or PromptLibrary()
    if not description.strip():
        raise MetricError("cannot extract facts from an empty description")
    prompt = prompts.fact_extraction.format(description=description)
    result = extractor_judge.generate(
        GenerationRequest(messages=[("user", prompt)], temperature=0.0)
    )
    facts = []
    for line in result.text.splitlines():
        cleaned = _BULLET_RE.sub("", line, count=1).strip()
        if cleaned:
            facts.append(cleaned)
    return FactSet(facts=facts, source=source)


def parse_scalar(text: str) -> float | None:
    """First number in the reply, clamped to [0, 1]; None if there is none."""
    match = _NUMBER_RE.search(text)
    if match is None:
        return None
    return min(1.0, max(0.0, float(match.group())))


def _entailment_scores(
    pairs: Sequence[tuple[str, str]], checker: Backend, prompts: PromptLibrary
) -> list[float]:
    """Scores for (claim, evidence) pairs. Backend failures propagate; an
    unparseable reply scores 0 with a warning."""
    requests = [
        GenerationRequest(
            messages=[("user", prompts.entailment.format(claim=claim, evidence=evidence))],
            temperature=0.0,
        )
        for claim, evidence in pairs
    ]
    results = generate_batch(requests, checker)
    scores = []
    for result in results:
        if result.error is not None:
            raise BackendError(f"checker failure: {result.error}")
        value = parse_scalar(result.text)
        if value is None:
            log.warning("checker reply not parseable as a number: %.60r", result.text)
            value = 0.0
        scores.append(value)
    return scores


def prisma(
    candidate: str,
    reference: str,
    extractor_judge: Backend,
    checker: Backend,
    prompts: PromptLibrary | None = None,
    threshold: float = ENTAILMENT_THRESHOLD,
    cand_facts: FactSet | None = None,
    ref_facts: FactSet | None = None,
) -> PRF:
    """Fact-level cross-entailment: candidate facts against the reference text
    and reference facts against the candidate text. Pre-extracted fact sets
    can be passed in to avoid repeating the extraction calls."""
    prompts = prompts or PromptLibrary()
    if cand_facts is None:
        cand_facts = extract_facts(candidate, extractor_judge, prompts, source="generated")
    if ref_facts is None:
        ref_facts = extract_facts(reference, extractor_judge, prompts, source="reference")
    pairs = [(fact, reference) for fact in cand_facts.facts]
    pairs += [(fact, candidate) for fact in ref_facts.facts]
    scores = _entailment_scores(pairs, checker, prompts)
    cand_scores = scores[: len(cand_facts)]
    ref_scores = scores[len(cand_facts):]
    p = (
        sum(1 for s in cand_scores if s > threshold) / len(cand_facts)
        if len(cand_facts) else 0.0
    )
    r = (
        sum(1 for s in ref_scores if s > threshold) / len(ref_facts)
        if len(ref_facts) else 0.0
    )
    return PRF(p, r, _harmonic(p, r))


def nli_grounding(
    candidate_facts: FactSet,
    book: Book,
    checker: Backend,
    chunk_tokens: int = NLI_CHUNK_TOKENS,
    counter: TokenCounter = whitespace_token_counter,
    prompts: PromptLibrary | None = None,
    threshold: float = ENTAILMENT_THRESHOLD,
) -> float:
    """Fraction of facts whose best per-chunk entailment score clears the
    threshold. No facts means nothing grounded."""
    prompts = prompts or PromptLibrary()
    if len(candidate_facts) == 0:
        return 0.0
    chunks = chunk_text(book.text, chunk_tokens, counter, book_id=book.id)
    pairs = [(fact, chunk.text) for fact in candidate_facts.facts for chunk in chunks]
    scores = _entailment_scores(pairs, checker, prompts)
    grounded = 0
    per_fact = len(chunks)
    for i in range(len(candidate_facts)):
        best = max(scores[i * per_fact:(i + 1) * per_fact])
        if best > threshold:
            grounded += 1
    return grounded / len(candidate_facts)


# ---------------------------------------------------------------------------
# QA-based evaluation

_ARTICLES = {"a", "an", "the"}
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> list[str]:
    """Lowercase, strip punctuation, drop articles, split on whitespace."""
    lowered = text.lower().translate(_PUNCT_TABLE)
    return [token for token in lowered.split() if token not in _ARTICLES]


def answer_token_f1(predicted: str, gold: str) -> float:
    pred_tokens = normalize_answer(predicted)
    gold_tokens = normalize_answer(gold)
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = Counter(pred_tokens) & Counter(gold_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    p = overlap / len(pred_tokens)
    r = overlap / len(gold_tokens)
    return _harmonic(p, r)


def qa_eval(
    candidate: str,
    reference_qas: QaReference,
    answerer: Backend,
    prompts: PromptLibrary | None = None,
) -> float:
    """Mean answer F1 over reference questions answered from the candidate
    text alone. An abstention scores 0 unless the gold answer abstains too."""
    prompts = prompts or PromptLibrary()
    if len(reference_qas) == 0:
        raise MetricError("QA evaluation needs a non-empty reference")
    requests = [
        GenerationRequest(
            messages=[("user", prompts.qa_answer.format(context=candidate, question=question))],
            temperature=0.0,
        )
        for question, _ in reference_qas.items
    ]
    results = generate_batch(requests, answerer)
    total = 0.0
    for (_, gold), result in zip(reference_qas.items, results):
        if result.error is not None:
            raise BackendError(f"answerer failure: {result.error}")
        predicted = result.text.strip().splitlines()[0].strip() if result.text.strip() else ""
        if predicted.strip(string.punctuation).lower() == ABSTAIN_TOKEN:
            total += float(gold.strip(string.punctuation).lower() == ABSTAIN_TOKEN)
        else:
            total += answer_token_f1(predicted, gold)
    return total / len(reference_qas)


# ---------------------------------------------------------------------------
# Significance testing

@dataclass
class SignificanceResult:
    p_value: float
    n_permutations: int
    observed_diff: float
    seed: int


def significance_test(
    scores_a: Sequence[float],
    scores_b: Sequence[float],
    n_permutations: int = 10_000,
    seed: int = 0,
) -> SignificanceResult:
    """Two-sided paired approximate randomization test: flip each pair with
    probability one half and count permuted differences at least as extreme.
    Add-one smoothing keeps the p-value strictly positive."""
    if len(scores_a) != len(scores_b):
        raise MetricError(
            f"paired scores differ in length: {len(scores_a)} vs {len(scores_b)}"
        )
    if len(scores_a) == 0:
        raise MetricError("significance test needs at least one pair")
    diffs = np.asarray(scores_a, dtype=float) - np.asarray(scores_b, dtype=float)
    observed = abs(float(diffs.mean()))
    rng = np.random.default_rng(seed)
    count = 0
    block = 1000
    for start in range(0, n_permutations, block):
        rows = min(block, n_permutations - start)
        signs = rng.integers(0, 2, size=(rows, diffs.size)) * 2 - 1
        permuted = np.abs((signs * diffs).mean(axis=1))
        count += int((permuted >= observed).sum())
    p_value = (count + 1) / (n_permutations + 1)
    return SignificanceResult(
        p_value=p_value,
        n_permutations=n_permutations,
        observed_diff=observed,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Report assembly

@dataclass
class MetricReport:
    task_id: str
    prisma: PRF
    qa_f1: float
    nli: float
    entmention: PRF
    rouge: PRF
    stats: TextStats
    warnings: list[str] = field(default_factory=list)


@dataclass
class MetricBackends:
    extractor_judge: Backend
    checker: Backend
    answerer: Backend


def metric_report(
    task_id: str,
    candidate: str,
    reference: str,
    book: Book,
    backends: MetricBackends,
    reference_qas: Optional[QaReference] = None,
    prompts: PromptLibrary | None = None,
    counter: TokenCounter = whitespace_token_counter,
    nli_chunk_tokens: int = NLI_CHUNK_TOKENS,
) -> MetricReport:
    """Run the full suite for one description. A missing reference QA set
    zeroes qa_f1 with a warning instead of failing the task."""
    prompts = prompts or PromptLibrary()
    warnings: list[str] = []
    cand_facts = extract_facts(candidate, backends.extractor_judge, prompts, source="generated")
    prisma_prf = prisma(
        candidate, reference, backends.extractor_judge, backends.checker, prompts,
        cand_facts=cand_facts,
    )
    nli = nli_grounding(cand_facts, book, backends.checker, nli_chunk_tokens, counter, prompts)
    if reference_qas is not None and len(reference_qas) > 0:
        qa_f1 = qa_eval(candidate, reference_qas, backends.answerer, prompts)
    else:
        qa_f1 = 0.0
        warnings.append("no reference QA pairs; qa_f1 reported as 0")
    return MetricReport(
        task_id=task_id,
        prisma=prisma_prf,
        qa_f1=qa_f1,
        nli=nli,
        entmention=entity_mention_f1(candidate, reference),
        rouge=rouge_l(candidate, reference),
        stats=text_stats(candidate, counter),
        warnings=warnings,
    )
