"""QA-guided character description pipeline for book-length texts."""

__version__ = "0.1.0"

from .corpus import Book, CharacterTask, Chunk, chunk_book, chunk_text, load_books, load_tasks
from .metrics import rouge_l, significance_test
from .reward import QaReference, RewardScore, extract_reference_qa, reward_score
from .strategies import ContextKind, ContextSpec, ModeKind, ReasoningMode, generate_description
from .trace import QaItem, ReasoningTrace, TraceFormat, parse_trace, serialize_trace

__all__ = [
    "__version__",
    "Book",
    "CharacterTask",
    "Chunk",
    "chunk_book",
    "chunk_text",
    "load_books",
    "load_tasks",
    "rouge_l",
    "significance_test",
    "QaReference",
    "RewardScore",
    "extract_reference_qa",
    "reward_score",
    "ContextKind",
    "ContextSpec",
    "ModeKind",
    "ReasoningMode",
    "generate_description",
    "QaItem",
    "ReasoningTrace",
    "TraceFormat",
    "parse_trace",
    "serialize_trace",
]
