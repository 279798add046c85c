"""Default prompt templates and their override mechanism.

Every template is plain text with named ``{placeholder}`` slots and can be
replaced by an external file via run config. Placeholders per template:

    description:     {context} {character} {book} {length}
    qa_generation:   {context} {character} {book} {output_format} {format_rules}
    merge:           {descriptions} {character} {book} {length}
    incremental:     {current} {context} {character} {book} {length}
    reference_qa:    {description} {character} {book}
    verify:          {evidence} {question} {answer}
    fact_extraction: {description}
    entailment:      {evidence} {claim}
    qa_answer:       {context} {question}
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .trace import TraceFormat

DESCRIPTION_TEMPLATE = """\
Context: {context}

Describe character {character} from book {book} based on the given context.
Return your output as a single paragraph (close to {length} words) including the important information.
"""

QA_GENERATION_TEMPLATE = """\
Context: {context}

Your task is to generate questions answer pairs about character: {character} from book: {book} given the above chunk of the book. You should focus on understanding aspects of the character (e.g., role, relationships, personality, events) that are mentioned in the context. Each qa-pair should be labelled as role, relationship, personality, event or other. We provide the definitions for these below.

Definitions:
Role: defines what part the character plays in the story, narrator, major/minor character.
Relationship: connections the character has with others, such as friendships or family ties.
Personality: character's behavior, traits, and attributes.
Event: actions and decisions the character is involved in throughout the story.
Other: any other fact that doesn't belong to the above categories.

Output format:
{output_format}

{format_rules}Generate QA-pairs only related to character: {character}. Generate QA-pairs only for information mentioned in the provided context. Do not include unanswered questions.

The questions have to mention the name of the character: {character}. Do not generate repetitive QA-pairs with same answer. If the character is not mentioned, simply return None.
"""

MERGE_TEMPLATE = """\
Intermediate descriptions of character {character} from book {book}:

{descriptions}

Merge these intermediate descriptions into a single coherent description of {character}. Remove repetition and resolve contradictions in favor of the majority of the descriptions.
Return your output as a single paragraph (close to {length} words) including the important information.
"""

INCREMENTAL_TEMPLATE = """\
Current description of character {character} from book {book}:
{current}

New context: {context}

Update the current description of {character} with any new information from the context above. Keep details that remain correct, integrate new facts, and revise anything the new context contradicts.
Return your output as a single paragraph (close to {length} words) including the important information.
"""

REFERENCE_QA_TEMPLATE = """\
Description of character {character} from book {book}:
{description}

Extract question answer pairs covering the facts stated in this description. Each question has to mention the name of the character: {character}. The answer should be short 1-4 words.

Output format:
Q1: <question> A1: <answer>
Q2: <question> A2: <answer>
...

If the description contains no usable facts, simply return None.
"""

VERIFY_TEMPLATE = """\
Evidence:
{evidence}

Question: {question}
Proposed answer: {answer}

Based only on the evidence above, can the question be answered with the proposed answer? Reply with a single word first: yes or no.
"""

FACT_EXTRACTION_TEMPLATE = """\
Text:
{description}

List the atomic facts stated in this text, one short declarative sentence per line. Output one fact per line with no numbering and no extra commentary. If there are no facts, return an empty response.
"""

ENTAILMENT_TEMPLATE = """\
Evidence:
{evidence}

Claim: {claim}

How strongly does the evidence support the claim? Reply with a single number between 0 and 1.
"""

QA_ANSWER_TEMPLATE = """\
Text:
{context}

Question: {question}

Extract the answer from the text above and reply with the shortest answer span only. If the text does not contain the answer, reply exactly: unanswerable.
"""


def qa_output_format(fmt: TraceFormat) -> str:
    """Two example lines plus ellipsis, with segments matching the format flags."""
    lines = []
    for i in (1, 2):
        segments = [f"Q{i}: <question>"]
        if fmt.include_explanation:
            segments.append(f"E{i}: <explanation>")
        if fmt.include_answer:
            segments.append(f"A{i}: <answer>")
        if fmt.include_type:
            segments.append(f"T{i}: <type>")
        lines.append(" ".join(segments))
    lines.append("...")
    return "\n".join(lines)


def qa_format_rules(fmt: TraceFormat) -> str:
    rules = []
    if fmt.include_explanation:
        rules.append(
            "Generate an explanation, 1-2 sentences that fully justify your answer, "
            "do not simply repeat the answer."
        )
    if fmt.include_type:
        rules.append("Type of qa has to be one of Role, Relationship, Personality, Event or Other.")
    if fmt.include_answer:
        rules.append("The answer should be short 1-4 words.")
    return " ".join(rules) + (" " if rules else "")


@dataclass
class PromptLibrary:
    description: str = DESCRIPTION_TEMPLATE
    qa_generation: str = QA_GENERATION_TEMPLATE
    merge: str = MERGE_TEMPLATE
    incremental: str = INCREMENTAL_TEMPLATE
    reference_qa: str = REFERENCE_QA_TEMPLATE
    verify: str = VERIFY_TEMPLATE
    fact_extraction: str = FACT_EXTRACTION_TEMPLATE
    entailment: str = ENTAILMENT_TEMPLATE
    qa_answer: str = QA_ANSWER_TEMPLATE

    @classmethod
    def from_overrides(cls, overrides: dict[str, str | Path]) -> "PromptLibrary":
        """Build a library with selected templates replaced by file contents."""
        known = {f.name for f in fields(cls)}
        unknown = set(overrides) - known
        if unknown:
            raise ValueError(f"unknown prompt names: {sorted(unknown)}")
        loaded = {name: Path(path).read_text(encoding="utf-8") for name, path in overrides.items()}
        return cls(**loaded)

    def qa_generation_prompt(self, context: str, character: str, book: str, fmt: TraceFormat) -> str:
        return self.qa_generation.format(
            context=context,
            character=character,
            book=book,
            output_format=qa_output_format(fmt),
            format_rules=qa_format_rules(fmt),
        )
