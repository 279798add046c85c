"""Shared text helpers: tokenization for metrics and lexical statistics."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable

_WORD_RE = re.compile(r"[a-z0-9]+")


def word_tokens(text: str) -> list[str]:
    """Lowercased alphanumeric tokens, punctuation discarded."""
    return _WORD_RE.findall(text.lower())


@dataclass
class TextStats:
    tokens: int
    unique_unigram_pct: float


def unique_unigram_pct(text: str) -> float:
    """Percentage of distinct lowercased unigrams; 0 for empty text by convention."""
    unigrams = word_tokens(text)
    if not unigrams:
        return 0.0
    return 100.0 * len(set(unigrams)) / len(unigrams)


def text_stats(text: str, counter: Callable[[str], int]) -> TextStats:
    return TextStats(tokens=counter(text), unique_unigram_pct=unique_unigram_pct(text))
