import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from charqa.llm import BackendError, CallableBackend, MockBackend
from charqa.reward import (
    QaReference,
    RewardError,
    RewardScore,
    extract_reference_qa,
    parse_yes_no,
    render_evidence,
    reward_score,
    verify,
)
from charqa.trace import QaItem, ReasoningTrace

from conftest import parse_verify_prompt, verdict_judge
from oracles import reward_naive


def trace_of(*pairs):
    return ReasoningTrace(items=[QaItem(question=q, answer=a) for q, a in pairs])


def always(token):
    return CallableBackend(lambda r: token, backend_id=f"always-{token}")


# ---------------------------------------------------------------------------
# yes/no parsing

def test_parse_yes_no_leading_token():
    assert parse_yes_no("yes") is True
    assert parse_yes_no("Yes, definitely.") is True
    assert parse_yes_no("NO") is False
    assert parse_yes_no('"No." The evidence contradicts it.') is False
    assert parse_yes_no("  yes.\nBecause...") is True


def test_parse_yes_no_unparseable():
    assert parse_yes_no("maybe") is None
    assert parse_yes_no("") is None
    assert parse_yes_no("the answer is yes") is None  # not the leading token


def test_render_evidence_lines():
    text = render_evidence([("Who?", "Him."), ("Where?", "There.")])
    assert text == "Q: Who? A: Him.\nQ: Where? A: There."


# ---------------------------------------------------------------------------
# verify

def test_verify_prompt_carries_question_answer_evidence(rule_judge):
    verify("Who leads?", "Anna", [("Who leads?", "Anna")], rule_judge)
    question, answer, evidence = parse_verify_prompt(rule_judge.calls[0].messages[0][1])
    assert question == "Who leads?"
    assert answer == "Anna"
    assert "Q: Who leads? A: Anna" in evidence


def test_verify_yes_and_no(rule_judge):
    evidence = [("Who leads?", "Anna"), ("Who cooks?", "Ben")]
    assert verify("Who leads?", "Anna", evidence, rule_judge) is True
    assert verify("Who leads?", "Ben", evidence, rule_judge) is False


def test_verify_unparseable_counts_as_no():
    judge = always("perhaps")
    assert verify("Q?", "A", [("Q?", "A")], judge) is False


def test_verify_empty_evidence_is_an_error():
    with pytest.raises(RewardError):
        verify("Q?", "A", [], always("yes"))


# ---------------------------------------------------------------------------
# reference extraction

def test_extract_reference_parses_qa_lines():
    judge = MockBackend([
        ("Extract question answer pairs", "Q1: Who leads the crew? A1: Anna\nQ2: Where is home? A2: The bay"),
    ])
    ref = extract_reference_qa("Anna leads the crew from the bay.", judge, task_id="t1")
    assert ref.items == [("Who leads the crew?", "Anna"), ("Where is home?", "The bay")]
    assert ref.source_task_id == "t1"
    assert len(ref) == 2
    # judges run deterministically
    assert judge.calls[0].temperature == 0.0


def test_extract_reference_empty_description_errors():
    with pytest.raises(RewardError):
        extract_reference_qa("   ", always("Q1: x A1: y"))


def test_extract_reference_no_pairs_errors():
    with pytest.raises(RewardError):
        extract_reference_qa("Some text.", always("None"))


def test_extract_reference_prompt_mentions_character_and_book():
    judge = MockBackend([("*", "Q1: Who is Zed? A1: A spy")])
    extract_reference_qa("Zed spies.", judge, character="Zed", book_title="The Files")
    prompt = judge.calls[0].messages[0][1]
    assert "Zed" in prompt and "The Files" in prompt


# ---------------------------------------------------------------------------
# reward_score

def reference_of(*pairs):
    return QaReference(items=list(pairs), source_task_id="ref")


FIXTURE_REFERENCE = [("Who leads?", "Anna"), ("Who cooks?", "Ben"),
                     ("Who sails?", "Cara"), ("Who sings?", "Dee"),
                     ("Who maps?", "Eli")]
FIXTURE_TRACE = [("Who leads?", "Anna"), ("Who cooks?", "Ben"),
                 ("Who sails?", "Zorro"), ("Who paints?", "Quinn")]
FIXTURE_VERDICTS = {
    ("Who leads?", "Anna"): True,   # trace and reference pass
    ("Who cooks?", "Ben"): True,    # trace and reference pass
    ("Who sails?", "Zorro"): False,
    ("Who paints?", "Quinn"): False,
    ("Who sails?", "Cara"): True,   # reference pass only
    ("Who sings?", "Dee"): False,
    ("Who maps?", "Eli"): False,
}


def test_reward_fixture_half_precision():
    # 2 of 4 trace answers hold against the reference; 3 of 5 reference
    # answers hold against the trace
    judge = verdict_judge(FIXTURE_VERDICTS)
    score = reward_score(trace_of(*FIXTURE_TRACE), reference_of(*FIXTURE_REFERENCE), judge)
    assert math.isclose(score.precision, 0.5, abs_tol=1e-12)
    assert math.isclose(score.recall, 3 / 5, abs_tol=1e-12)

    expected_f1 = 2 * 0.5 * 0.6 / (0.5 + 0.6)
    assert math.isclose(score.f1, expected_f1, abs_tol=1e-12)
    assert math.isclose(score.f1, 6 / 11, abs_tol=1e-12)
    assert score.verified_generated == 2
    assert score.verified_reference == 3


def test_reward_empty_trace_scores_zero(rule_judge):
    score = reward_score(ReasoningTrace(), reference_of(("Q?", "A")), rule_judge)
    assert score == RewardScore(precision=0.0, recall=0.0, f1=0.0)
    assert rule_judge.calls == []  # nothing to verify


def test_reward_empty_reference_is_an_error(rule_judge):
    with pytest.raises(RewardError):
        reward_score(trace_of(("Q?", "A")), reference_of(), rule_judge)


def test_reward_answerless_trace_items_error(rule_judge):
    trace = ReasoningTrace(items=[QaItem(question="Who?", answer="")])
    with pytest.raises(RewardError, match="without answers"):
        reward_score(trace, reference_of(("Q?", "A")), rule_judge)


def test_reward_zero_denominator_f1():
    judge = always("no")
    score = reward_score(trace_of(("Q?", "A")), reference_of(("R?", "B")), judge)
    assert score.precision == 0.0 and score.recall == 0.0 and score.f1 == 0.0


def test_reward_perfect_score():
    judge = always("yes")
    score = reward_score(trace_of(("Q?", "A")), reference_of(("R?", "B")), judge)
    assert score == RewardScore(1.0, 1.0, 1.0, verified_generated=1, verified_reference=1)


def test_reward_single_batch_covers_both_passes():
    judge = always("yes")
    trace = trace_of(("Q1?", "A1"), ("Q2?", "A2"), ("Q3?", "A3"))
    ref = reference_of(("R1?", "B1"), ("R2?", "B2"))
    score = reward_score(trace, ref, judge)
    # every trace item checked against the reference and vice versa
    assert len(judge.calls) == 5
    assert score.f1 == 1.0


def test_reward_judge_backend_failure():
    judge = MockBackend([])  # every call fails
    with pytest.raises(RewardError, match="backend failure"):
        reward_score(trace_of(("Q?", "A")), reference_of(("R?", "B")), judge)


def test_reward_verification_direction(rule_judge):
    # trace items are verified against reference evidence, reference items
    # against trace evidence; an asymmetric judge exposes any mix-up
    ref = reference_of(("Who leads?", "Anna"),)
    trace = trace_of(("Who leads?", "Anna"), ("Who paints?", "Quinn"))
    reward_score(trace, ref, rule_judge)
    prompts = [parse_verify_prompt(c.messages[0][1]) for c in rule_judge.calls]
    trace_checks = [p for p in prompts if p[0] in ("Who leads?", "Who paints?") and "Q: Who leads? A: Anna" == p[2]]
    # the two trace items were checked against the one-line reference evidence
    assert len(trace_checks) >= 2


@settings(max_examples=60, deadline=None)
@given(
    n_trace=st.integers(min_value=1, max_value=5),
    n_ref=st.integers(min_value=1, max_value=5),
)
def test_reward_always_yes_judge_gives_ones(n_trace, n_ref):
    trace = trace_of(*[(f"Q{i}?", f"A{i}") for i in range(n_trace)])
    ref = reference_of(*[(f"R{i}?", f"B{i}") for i in range(n_ref)])
    score = reward_score(trace, ref, always("yes"))
    assert score.precision == 1.0 and score.recall == 1.0 and score.f1 == 1.0
    assert score.verified_generated == n_trace
    assert score.verified_reference == n_ref


def test_reward_matches_naive_oracle_small_cases(rule_judge):
    rng = random.Random(31)
    names = ["Anna", "Ben", "Cara", "Dee", "Eli", "Fay"]
    for _ in range(60):
        n_ref = rng.randint(1, 4)
        ref_pairs = [(f"Who is number {i}?", rng.choice(names)) for i in range(n_ref)]
        n_trace = rng.randint(0, 4)
        trace_pairs = []
        for i in range(n_trace):
            if ref_pairs and rng.random() < 0.5:
                trace_pairs.append(rng.choice(ref_pairs))  # exact hit
            else:
                trace_pairs.append((f"Who is letter {i}?", rng.choice(names)))
        expected = reward_naive(trace_pairs, ref_pairs)
        score = reward_score(trace_of(*trace_pairs), reference_of(*ref_pairs), rule_judge)
        assert math.isclose(score.precision, expected[0], abs_tol=1e-12)
        assert math.isclose(score.recall, expected[1], abs_tol=1e-12)
        assert math.isclose(score.f1, expected[2], abs_tol=1e-12)
