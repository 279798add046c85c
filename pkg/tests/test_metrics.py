import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from charqa.corpus import Book
from charqa.llm import BackendError, CallableBackend, MockBackend
from charqa.metrics import (
    FactSet,
    MetricBackends,
    MetricError,
    answer_token_f1,
    entity_mention_f1,
    extract_entities,
    extract_facts,
    lcs_length,
    metric_report,
    nli_grounding,
    normalize_answer,
    parse_scalar,
    prisma,
    qa_eval,
    rouge_l,
    significance_test,
)
from charqa.reward import QaReference
from charqa.text import text_stats

from oracles import lcs_bitmask, lcs_recursive, rouge_l_naive


# ---------------------------------------------------------------------------
# LCS and Rouge-L

def test_lcs_known_cases():
    assert lcs_length("abcde", "ace") == 3
    assert lcs_length([], ["a"]) == 0
    assert lcs_length(["x"], ["x"]) == 1
    assert lcs_length("abc".split(), "def".split()) == 0


def test_lcs_matches_recursive_oracle_random():
    rng = random.Random(5)
    vocab = ["a", "b", "c", "d"]
    for _ in range(200):
        s1 = [rng.choice(vocab) for _ in range(rng.randint(0, 12))]
        s2 = [rng.choice(vocab) for _ in range(rng.randint(0, 12))]
        assert lcs_length(s1, s2) == lcs_recursive(tuple(s1), tuple(s2))


def test_lcs_matches_bitmask_oracle_small():
    rng = random.Random(6)
    for _ in range(60):
        s1 = [rng.choice("ab") for _ in range(rng.randint(0, 8))]
        s2 = [rng.choice("ab") for _ in range(rng.randint(0, 8))]
        assert lcs_length(s1, s2) == lcs_bitmask(s1, s2)


def test_rouge_identical_text():
    prf = rouge_l("The captain sailed home.", "The captain sailed home.")
    assert prf.p == prf.r == prf.f == 1.0


def test_rouge_no_overlap():
    prf = rouge_l("alpha beta", "gamma delta")
    assert prf.p == prf.r == prf.f == 0.0


def test_rouge_hand_computed():
    # candidate tokens: [the, cat, sat]; reference: [the, cat, sat, down]
    prf = rouge_l("The cat sat", "the cat sat down")
    assert math.isclose(prf.p, 1.0)
    assert math.isclose(prf.r, 3 / 4)
    assert math.isclose(prf.f, 2 * 1.0 * 0.75 / 1.75)


def test_rouge_case_and_punctuation_insensitive():
    assert rouge_l("Hello, world!", "hello world").f == 1.0


def test_rouge_empty_sides():
    assert rouge_l("", "reference text").f == 0.0
    assert rouge_l("candidate", "").f == 0.0
    assert rouge_l("", "").f == 0.0


def test_rouge_matches_naive_oracle_random():
    rng = random.Random(17)
    vocab = ["red", "blue", "green", "dog", "cat"]
    for _ in range(100):
        cand_tokens = [rng.choice(vocab) for _ in range(rng.randint(0, 10))]
        ref_tokens = [rng.choice(vocab) for _ in range(rng.randint(0, 10))]
        expected_p, expected_r, expected_f = rouge_l_naive(cand_tokens, ref_tokens)
        got = rouge_l(" ".join(cand_tokens), " ".join(ref_tokens))
        assert math.isclose(got.p, expected_p, abs_tol=1e-12)
        assert math.isclose(got.r, expected_r, abs_tol=1e-12)
        assert math.isclose(got.f, expected_f, abs_tol=1e-12)


# ---------------------------------------------------------------------------
# entity mentions

def test_extract_entities_basic():
    entities = extract_entities("Anna Karenina met Count Vronsky in Moscow.")
    assert "anna karenina" in entities
    assert "count vronsky" in entities
    assert "moscow" in entities


def test_extract_entities_sentence_start_stoplist():
    # "The" at sentence start is not an entity, true names are kept
    entities = extract_entities("The ship sailed. Anna waved goodbye.")
    assert "anna" in entities
    assert "the" not in entities
    assert "the ship" not in entities


def test_extract_entities_possessive_normalized():
    entities = extract_entities("That was Anna's idea.")
    assert "anna" in entities


def test_extract_entities_adjacent_capitalized_run():
    entities = extract_entities("They feared Captain James Hook deeply.")
    assert "captain james hook" in entities


def test_extract_entities_empty_text():
    assert extract_entities("") == set()
    assert extract_entities("no capitals here at all.") == set()


def test_entity_mention_f1_hand_case():
    # candidate has {anna, ben}; reference has {anna, cara, dee}
    # wait: precision 1/2, recall 1/3 -> f = 0.4
    candidate = "Anna met Ben."
    reference = "Anna, Cara and Dee traveled east."
    prf = entity_mention_f1(candidate, reference)
    assert math.isclose(prf.p, 0.5)
    assert math.isclose(prf.r, 1 / 3)
    assert math.isclose(prf.f, 0.4)


def test_entity_mention_f1_empty_sides():
    assert entity_mention_f1("no names.", "Anna went home.").f == 0.0
    assert entity_mention_f1("Anna went home.", "no names.").f == 0.0


def test_entity_mention_f1_identical():
    text = "Anna met Ben in Paris."
    prf = entity_mention_f1(text, text)
    assert prf.p == prf.r == prf.f == 1.0


def test_entity_mention_custom_extractor():
    extractor = lambda text: set(text.split())
    prf = entity_mention_f1("a b", "b c", extractor=extractor)
    assert math.isclose(prf.p, 0.5) and math.isclose(prf.r, 0.5)


# ---------------------------------------------------------------------------
# fact extraction and scalar parsing

def test_extract_facts_strips_bullets():
    judge = MockBackend([("*", "- Anna leads.\n2. Ben cooks.\n* Cara sails.\n\n")])
    facts = extract_facts("whatever", judge)
    assert facts.facts == ["Anna leads.", "Ben cooks.", "Cara sails."]


def test_extract_facts_empty_description_errors():
    with pytest.raises(MetricError):
        extract_facts("   ", MockBackend([("*", "x")]))


def test_extract_facts_runs_at_temperature_zero():
    judge = MockBackend([("*", "A fact.")])
    extract_facts("text", judge)
    assert judge.calls[0].temperature == 0.0


def test_parse_scalar_variants():
    assert parse_scalar("0.85") == 0.85
    assert parse_scalar("Score: 0.3 because...") == 0.3
    assert parse_scalar("1") == 1.0
    assert parse_scalar("2.5") == 1.0      # clamped into [0, 1]
    assert parse_scalar("-0.2") == 0.0
    assert parse_scalar("no number") is None
    assert parse_scalar("") is None


# ---------------------------------------------------------------------------
# PRISMA

def scripted_checker(scores_by_claim):
    """Checker returning a canned scalar per claim substring; 0 otherwise."""

    def fn(request):
        prompt = request.messages[-1][1]
        for claim, value in scores_by_claim.items():
            if claim in prompt.split("Claim: ", 1)[-1]:
                return str(value)
        return "0.0"

    return CallableBackend(fn, backend_id="scripted-checker")


def test_prisma_hand_fixture():
    # 2 of 4 candidate facts supported by the reference; 3 of 5 reference
    # facts supported by the candidate -> p=0.5, r=0.6, f=6/11
    cand = FactSet(facts=[f"cand fact {i}." for i in range(4)], source="generated")
    ref = FactSet(facts=[f"ref fact {i}." for i in range(5)], source="reference")
    scores = {
        "cand fact 0.": 0.9, "cand fact 1.": 0.8, "cand fact 2.": 0.2, "cand fact 3.": 0.1,
        "ref fact 0.": 0.7, "ref fact 1.": 0.9, "ref fact 2.": 0.6, "ref fact 3.": 0.4,
        "ref fact 4.": 0.2,
    }
    checker = scripted_checker(scores)
    prf = prisma("candidate text", "reference text", MockBackend([("*", "unused")]),
                 checker, cand_facts=cand, ref_facts=ref)
    assert math.isclose(prf.p, 0.5)
    assert math.isclose(prf.r, 0.6)
    assert math.isclose(prf.f, 6 / 11)


def test_prisma_threshold_is_strict():
    cand = FactSet(facts=["borderline."])
    ref = FactSet(facts=["supported."])
    checker = scripted_checker({"borderline.": 0.5, "supported.": 0.51})
    prf = prisma("c", "r", MockBackend([("*", "x")]), checker,
                 cand_facts=cand, ref_facts=ref)
    assert prf.p == 0.0  # exactly at threshold does not count
    assert prf.r == 1.0


def test_prisma_extracts_facts_when_not_given():
    def extractor(request):
        prompt = request.messages[-1][1]
        return "Anna leads." if "candidate text" in prompt else "Ben cooks."

    checker = scripted_checker({"Anna leads.": 0.9, "Ben cooks.": 0.9})
    prf = prisma("candidate text", "reference text",
                 CallableBackend(extractor), checker)
    assert prf.p == 1.0 and prf.r == 1.0


def test_prisma_empty_fact_sets_score_zero():
    checker = scripted_checker({})
    prf = prisma("c", "r", MockBackend([("*", "x")]), checker,
                 cand_facts=FactSet(facts=[]), ref_facts=FactSet(facts=["a fact."]))
    assert prf.p == 0.0
    assert prf.f == 0.0


def test_prisma_unparseable_checker_reply_counts_zero(caplog):
    cand = FactSet(facts=["a fact."])
    ref = FactSet(facts=["b fact."])
    checker = CallableBackend(lambda r: "garbled")
    prf = prisma("c", "r", MockBackend([("*", "x")]), checker,
                 cand_facts=cand, ref_facts=ref)
    assert prf.p == 0.0 and prf.r == 0.0


def test_prisma_checker_failure_raises():
    cand = FactSet(facts=["a fact."])
    ref = FactSet(facts=["b fact."])
    with pytest.raises(BackendError):
        prisma("c", "r", MockBackend([("*", "x")]), MockBackend([]),
               cand_facts=cand, ref_facts=ref)


# ---------------------------------------------------------------------------
# NLI grounding

def test_nli_grounding_max_over_chunks():
    # fact scores per chunk: fact0 -> (0.9 in chunk 1), fact1 -> 0.4 max,
    # fact2 -> 0.6: two of three clear the 0.5 bar
    book = Book(id="b", title="T", text="c1w " * 4 + "c2w " * 4)

    def fn(request):
        prompt = request.messages[-1][1]
        claim = prompt.split("Claim: ", 1)[1].split("\n", 1)[0]
        chunk = "c1" if "c1w" in prompt else "c2"
        table = {
            ("fact zero.", "c1"): 0.1, ("fact zero.", "c2"): 0.9,
            ("fact one.", "c1"): 0.4, ("fact one.", "c2"): 0.3,
            ("fact two.", "c1"): 0.6, ("fact two.", "c2"): 0.2,
        }
        return str(table[(claim, chunk)])

    facts = FactSet(facts=["fact zero.", "fact one.", "fact two."])
    rate = nli_grounding(facts, book, CallableBackend(fn), chunk_tokens=4)
    assert math.isclose(rate, 2 / 3)


def test_nli_grounding_no_facts_is_zero():
    book = Book(id="b", title="T", text="words here")
    assert nli_grounding(FactSet(facts=[]), book, CallableBackend(lambda r: "1.0")) == 0.0


def test_nli_grounding_batches_all_pairs():
    book = Book(id="b", title="T", text="a b c d e f g h")
    checker = MockBackend([("*", "1.0")])
    facts = FactSet(facts=["f1.", "f2."])
    nli_grounding(facts, book, checker, chunk_tokens=4)
    assert len(checker.calls) == 4  # 2 facts x 2 chunks


# ---------------------------------------------------------------------------
# QA eval

def test_normalize_answer():
    assert normalize_answer("The Grand Hotel!") == ["grand", "hotel"]
    assert normalize_answer("An apple") == ["apple"]
    assert normalize_answer("") == []


def test_answer_token_f1_cases():
    assert answer_token_f1("the captain", "captain") == 1.0
    assert answer_token_f1("a red dog", "red cat") > 0.0
    assert answer_token_f1("", "") == 1.0
    assert answer_token_f1("word", "") == 0.0
    assert answer_token_f1("", "word") == 0.0
    assert answer_token_f1("alpha", "beta") == 0.0


def test_answer_token_f1_partial_overlap():
    # pred tokens {red, dog}, gold {red, cat}: p=r=1/2 -> f1=1/2
    assert math.isclose(answer_token_f1("red dog", "red cat"), 0.5)


def test_qa_eval_means_token_f1():
    ref = QaReference(items=[("Who leads?", "Anna"), ("Where?", "the bay")],
                      source_task_id="t")
    answers = {"Who leads?": "Anna", "Where?": "harbor"}

    def fn(request):
        prompt = request.messages[-1][1]
        question = prompt.split("Question: ", 1)[1].split("\n", 1)[0]
        return answers[question]

    score = qa_eval("candidate text", ref, CallableBackend(fn))
    assert math.isclose(score, (1.0 + 0.0) / 2)


def test_qa_eval_takes_first_line_of_reply():
    ref = QaReference(items=[("Q?", "Anna")], source_task_id="t")
    answerer = CallableBackend(lambda r: "Anna\nBecause the text says so.")
    assert qa_eval("text", ref, answerer) == 1.0


def test_qa_eval_abstention_matching():
    ref = QaReference(items=[("Q?", "unanswerable")], source_task_id="t")
    assert qa_eval("text", ref, CallableBackend(lambda r: "unanswerable")) == 1.0
    assert qa_eval("text", ref, CallableBackend(lambda r: "Unanswerable.")) == 1.0
    assert qa_eval("text", ref, CallableBackend(lambda r: "Anna")) == 0.0


def test_qa_eval_abstaining_on_answerable_scores_zero():
    ref = QaReference(items=[("Q?", "Anna")], source_task_id="t")
    assert qa_eval("text", ref, CallableBackend(lambda r: "unanswerable")) == 0.0


def test_qa_eval_empty_reference_errors():
    with pytest.raises(MetricError):
        qa_eval("text", QaReference(items=[], source_task_id="t"),
                CallableBackend(lambda r: "x"))


def test_qa_eval_prompt_contains_candidate_and_question():
    ref = QaReference(items=[("Who leads the crew?", "Anna")], source_task_id="t")
    answerer = MockBackend([("*", "Anna")])
    qa_eval("The crew follows Anna.", ref, answerer)
    prompt = answerer.calls[0].messages[0][1]
    assert "The crew follows Anna." in prompt
    assert "Who leads the crew?" in prompt


def test_qa_eval_backend_failure_raises():
    ref = QaReference(items=[("Q?", "A")], source_task_id="t")
    with pytest.raises(BackendError):
        qa_eval("text", ref, MockBackend([]))


# ---------------------------------------------------------------------------
# significance

def test_significance_identical_scores_p_one():
    scores = [0.5, 0.6, 0.7, 0.8]
    result = significance_test(scores, scores, n_permutations=500, seed=3)
    assert result.p_value == 1.0
    assert result.observed_diff == 0.0


def test_significance_large_gap_small_p():
    a = [1.0] * 50
    b = [0.0] * 50
    result = significance_test(a, b, n_permutations=2000, seed=1)
    assert result.p_value <= 0.001
    assert result.observed_diff == 1.0


def test_significance_p_never_zero():
    a = [10.0] * 30
    b = [0.0] * 30
    result = significance_test(a, b, n_permutations=100, seed=0)
    assert result.p_value >= 1 / 101


def test_significance_deterministic_per_seed():
    rng = random.Random(8)
    a = [rng.random() for _ in range(20)]
    b = [rng.random() for _ in range(20)]
    r1 = significance_test(a, b, n_permutations=300, seed=42)
    r2 = significance_test(a, b, n_permutations=300, seed=42)
    assert r1 == r2
    r3 = significance_test(a, b, n_permutations=300, seed=43)
    assert r3.seed != r1.seed


def test_significance_validates_inputs():
    with pytest.raises(MetricError):
        significance_test([1.0], [1.0, 2.0])
    with pytest.raises(MetricError):
        significance_test([], [])


def test_significance_two_sided_on_magnitude():
    a = [0.0] * 40
    b = [1.0] * 40
    # direction does not matter: |diff| is compared
    result = significance_test(a, b, n_permutations=1000, seed=5)
    assert result.p_value <= 0.01


# ---------------------------------------------------------------------------
# combined report

def report_backends(gold="Anna leads the crew."):
    def extractor(request):
        return "Anna leads."

    def checker(request):
        return "0.9"

    def answerer(request):
        return "Anna"

    return MetricBackends(
        extractor_judge=CallableBackend(extractor),
        checker=CallableBackend(checker),
        answerer=CallableBackend(answerer),
    )


def test_metric_report_perfect_candidate():
    book = Book(id="b", title="T", text="Anna leads the crew. " * 20)
    gold = "Anna leads the crew."
    ref_qas = QaReference(items=[("Who leads the crew?", "Anna")], source_task_id="t1")
    report = metric_report("t1", gold, gold, book, report_backends(),
                           reference_qas=ref_qas)
    assert report.rouge.f == 1.0
    assert report.entmention.f == 1.0
    assert report.prisma.f == 1.0
    assert report.qa_f1 == 1.0
    assert report.nli == 1.0
    assert report.task_id == "t1"


def test_metric_report_missing_reference_qas_warns():
    book = Book(id="b", title="T", text="Anna leads. " * 10)
    report = metric_report("t1", "Anna leads.", "Anna leads.", book, report_backends())
    assert report.qa_f1 == 0.0
    assert any("no reference QA pairs" in w for w in report.warnings)


def test_text_stats_composition():
    stats = text_stats("one two two three", lambda t: len(t.split()))
    assert stats.tokens == 4
    assert math.isclose(stats.unique_unigram_pct, 75.0)
