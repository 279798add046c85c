"""Book/task ingestion and token-budgeted chunking.

Books and character tasks live in line-delimited JSON files (one record per
line, newlines inside the text field escaped by JSON). Chunking splits a
narrative into contiguous slices under a token budget, preferring whitespace
boundaries, such that concatenating the chunk texts reproduces the source
exactly.

Token counting is pluggable: any ``Callable[[str], int]`` whose prefix counts
are non-decreasing works. The default counts whitespace-separated words; a
fixed-ratio byte counter is provided for byte-budget use cases.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

TokenCounter = Callable[[str], int]


class CorpusError(Exception):
    """Malformed corpus files or unresolved references."""


@dataclass
class Book:
    id: str
    title: str
    text: str


@dataclass
class CharacterTask:
    task_id: str
    book_id: str
    character: str
    gold_description: str | None = None
    target_words: int | None = None


@dataclass(frozen=True)
class Chunk:
    book_id: str
    index: int
    text: str
    token_count: int


@dataclass
class CorpusStats:
    num_books: int
    avg_characters_per_book: float
    num_samples: int
    avg_input_words: float
    avg_output_words: float


def whitespace_token_counter(text: str) -> int:
    """Count whitespace-separated words."""
    return len(text.split())


def make_byte_ratio_counter(ratio: int = 4) -> TokenCounter:
    """Counter approximating tokens as ceil(utf8_bytes / ratio)."""
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")

    def count(text: str) -> int:
        return math.ceil(len(text.encode("utf-8")) / ratio)

    return count


def _read_jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if not isinstance(record, dict):
                raise CorpusError(f"{path}:{lineno}: record is not an object")
            yield lineno, record


def load_books(path: str | Path) -> list[Book]:
    """Load books from a JSONL file with fields id/title/text.

    Rejects duplicate ids and records missing required fields, reporting the
    offending line number.
    """
    books: list[Book] = []
    seen: set[str] = set()
    for lineno, record in _read_jsonl(path):
        for field in ("id", "title", "text"):
            if field not in record:
                raise CorpusError(f"{path}:{lineno}: missing field '{field}'")
        book_id = str(record["id"])
        if not book_id:
            raise CorpusError(f"{path}:{lineno}: empty book id")
        if book_id in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate book id '{book_id}'")
        if not record["text"]:
            raise CorpusError(f"{path}:{lineno}: book '{book_id}' has empty text")
        seen.add(book_id)
        books.append(Book(id=book_id, title=str(record["title"]), text=record["text"]))
    return books


def load_tasks(path: str | Path, books: Sequence[Book] | None = None) -> list[CharacterTask]:
    """Load character tasks; when ``books`` is given, verify book_id references."""
    known = {b.id for b in books} if books is not None else None
    tasks: list[CharacterTask] = []
    seen: set[str] = set()
    for lineno, record in _read_jsonl(path):
        for field in ("task_id", "book_id", "character"):
            if field not in record:
                raise CorpusError(f"{path}:{lineno}: missing field '{field}'")
        task_id = str(record["task_id"])
        if task_id in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate task id '{task_id}'")
        seen.add(task_id)
        book_id = str(record["book_id"])
        if known is not None and book_id not in known:
            raise CorpusError(f"{path}:{lineno}: task '{task_id}' references unknown book '{book_id}'")
        target_words = record.get("target_words")
        if target_words is not None:
            target_words = int(target_words)
            if target_words < 1:
                raise CorpusError(f"{path}:{lineno}: target_words must be >= 1")
        tasks.append(
            CharacterTask(
                task_id=task_id,
                book_id=book_id,
                character=str(record["character"]),
                gold_description=record.get("gold_description"),
                target_words=target_words,
            )
        )
    return tasks


def _max_feasible_prefix(text: str, start: int, max_tokens: int, counter: TokenCounter) -> int:
    """Largest L such that counter(text[start:start+L]) <= max_tokens.

    Exploits that prefix counts are non-decreasing (galloping + bisection), so
    counter calls touch at most ~2x the final window. Returns at least 1 so a
    chunk always makes progress, even if a single character busts the budget.
    """
    remaining = len(text) - start
    lo, hi = 1, 1
    while hi < remaining and counter(text[start : start + hi]) <= max_tokens:
        lo = hi
        hi = min(hi * 2, remaining)
    if hi == remaining and counter(text[start : start + hi]) <= max_tokens:
        return remaining
    # invariant: count(lo) <= max_tokens < count(hi); bisect the boundary
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if counter(text[start : start + mid]) <= max_tokens:
            lo = mid
        else:
            hi = mid
    if lo == 1 and counter(text[start : start + 1]) > max_tokens:
        return 1
    return lo


def chunk_text(
    text: str,
    max_tokens: int,
    counter: TokenCounter = whitespace_token_counter,
    book_id: str = "",
) -> list[Chunk]:
    """Split text into chunks of at most ``max_tokens`` tokens.

    Cuts prefer the last whitespace boundary inside the feasible window; a
    whitespace-free run longer than the budget is split mid-run. Concatenating
    the returned chunk texts reproduces ``text`` byte-for-byte.
    """
    if max_tokens < 1:
        raise ValueError(f"max_tokens must be >= 1, got {max_tokens}")
    chunks: list[Chunk] = []
    start = 0
    n = len(text)
    while start < n:
        length = _max_feasible_prefix(text, start, max_tokens, counter)
        cut = start + length
        if cut < n and not text[cut].isspace() and not text[cut - 1].isspace():
            # would split a word: back off to just after the last whitespace
            boundary = -1
            for j in range(cut, start, -1):
                if text[j - 1].isspace():
                    boundary = j
                    break
            if boundary > start:
                cut = boundary
        piece = text[start:cut]
        chunks.append(
            Chunk(book_id=book_id, index=len(chunks), text=piece, token_count=counter(piece))
        )
        start = cut
    return chunks


def chunk_book(book: Book, max_tokens: int, counter: TokenCounter = whitespace_token_counter) -> list[Chunk]:
    return chunk_text(book.text, max_tokens, counter, book_id=book.id)


def dataset_stats(books: Sequence[Book], tasks: Sequence[CharacterTask]) -> CorpusStats:
    """Corpus-level statistics over the books referenced by the tasks.

    Word averages use the whitespace counter; input length is averaged per
    task (a book read by k tasks contributes k times), output length over the
    tasks that carry a gold description.
    """
    by_id = {b.id: b for b in books}
    input_words: list[int] = []
    output_words: list[int] = []
    referenced: set[str] = set()
    for task in tasks:
        book = by_id.get(task.book_id)
        if book is None:
            raise CorpusError(f"task '{task.task_id}' references unknown book '{task.book_id}'")
        referenced.add(book.id)
        input_words.append(whitespace_token_counter(book.text))
        if task.gold_description:
            output_words.append(whitespace_token_counter(task.gold_description))
    num_books = len(referenced)
    num_samples = len(tasks)
    return CorpusStats(
        num_books=num_books,
        avg_characters_per_book=num_samples / num_books if num_books else 0.0,
        num_samples=num_samples,
        avg_input_words=sum(input_words) / len(input_words) if input_words else 0.0,
        avg_output_words=sum(output_words) / len(output_words) if output_words else 0.0,
    )
