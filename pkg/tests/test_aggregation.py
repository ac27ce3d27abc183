import json
import math
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from conftest import make_instance, rule, scripted_ctx, synthetic_ctx
from pairjudge.aggregation import (
    DecisionMethod,
    FinalDecision,
    PointwiseScores,
    WeightsMode,
    assign_weights,
    final_judge,
    majority_fallback,
    normalize_weights,
    pointwise_aggregate,
    pointwise_decision,
    pointwise_final_judge,
    pointwise_judge,
)
from pairjudge.core import (
    Aspect, Confidence, Criterion, CriterionJudgment, EvidenceBasis, PreferenceLabel, Verdict,
    swap_label, swap_verdict,
)
from pairjudge.prompts import NO_EVIDENCE_TEXT
from pairjudge.swap import EvidenceSet

G = ("g", "c")
OVERALL_B = {"Overall": {"winner": "B", "reasoning": "B is complete."}}


def crits(n):
    return [Criterion(f"c{i}", f"check {i}", "", (EvidenceBasis.CODE,)) for i in range(1, n + 1)]


def evidence(verdicts):
    cs = crits(len(verdicts))
    return EvidenceSet([(c, CriterionJudgment(c.id, v, Confidence.HIGH, "", (), Aspect.CORRECTNESS))
                        for c, v in zip(cs, verdicts)])


def test_final_judge_parses_winner():
    ctx, backend = scripted_ctx([rule("final_judge", OVERALL_B)])
    d = final_judge(ctx, make_instance(0), evidence([Verdict.A]), G)
    assert d == FinalDecision(PreferenceLabel.B, "B is complete.", DecisionMethod.FINAL_JUDGE)
    assert '"criterion_id": "c1"' in backend.requests[0].prompt_text


def test_final_judge_with_empty_evidence_still_calls():
    ctx, backend = scripted_ctx([rule("final_judge", OVERALL_B)])
    final_judge(ctx, make_instance(0), EvidenceSet(), G)
    assert len(backend.requests) == 1 and NO_EVIDENCE_TEXT in backend.requests[0].prompt_text


def test_final_judge_failure_uses_majority():
    ctx, _ = scripted_ctx([rule("final_judge", "nope")])
    ev = evidence([Verdict.A, Verdict.A, Verdict.A, Verdict.B, Verdict.TIE])
    d = final_judge(ctx, make_instance(0), ev, G)
    assert d.winner is PreferenceLabel.A and d.method is DecisionMethod.MAJORITY_FALLBACK


@given(st.lists(st.sampled_from(list(Verdict)), max_size=12))
def test_majority_is_swap_equivariant(vs):
    assert majority_fallback([swap_verdict(v) for v in vs]) is swap_label(majority_fallback(vs))


def test_majority_examples():
    assert majority_fallback([]) is PreferenceLabel.TIE
    assert majority_fallback([Verdict.INSUFFICIENT, Verdict.B]) is PreferenceLabel.B


def test_decision_round_trip():
    d = FinalDecision(PreferenceLabel.TIE, "r", DecisionMethod.POINTWISE_WEIGHTED)
    assert FinalDecision.from_dict(d.to_dict()) == d


def pw(ids, a, b):
    return {"criterion_results": [{"criterion_id": i, "decision": "YES" if x else "NO"} for i, x in zip(ids, a)]}


def test_pointwise_judge_two_calls_and_zero_fill():
    ctx, backend = scripted_ctx([
        rule("pointwise_judging", {"criterion_results": [{"criterion_id": "c1", "decision": "YES"}]},
             contains="check"),
    ])
    scores = pointwise_judge(ctx, make_instance(0), crits(2), G)
    assert len(backend.requests) == 2
    assert scores.score_a == (1, 0) and scores.score_b == (1, 0)
    assert sum("scored 0" in w for w in ctx.warnings) == 2


def test_pointwise_judge_failed_side_is_degraded():
    inst = make_instance(0)
    ctx, _ = scripted_ctx([
        rule("pointwise_judging", "broken", contains=inst.response_b),
        rule("pointwise_judging", pw(["c1", "c2"], [1, 1], None)),
    ])
    scores = pointwise_judge(ctx, inst, crits(2), G)
    assert scores.score_a == (1, 1) and scores.score_b == (0, 0) and scores.degraded == ("B",)


def test_pointwise_prompt_shows_one_response():
    inst = make_instance(0)
    ctx, backend = synthetic_ctx()
    pointwise_judge(ctx, inst, crits(3), G)
    a_text, b_text = (r.prompt_text for r in backend.requests)
    assert inst.response_a in a_text and inst.response_b not in a_text
    assert inst.response_b in b_text and inst.response_a not in b_text


@pytest.mark.parametrize("a,b,w,want", [
    ((1, 1, 0), (0, 1, 0), (), PreferenceLabel.A),
    ((1, 0), (0, 1), (), PreferenceLabel.TIE),
    ((1, 0), (0, 1), (0.2, 0.8), PreferenceLabel.B),
    ((0, 0), (0, 0), (0.5, 0.5), PreferenceLabel.TIE),
])
def test_aggregate_examples(a, b, w, want):
    s = PointwiseScores(tuple(f"c{i}" for i in range(len(a))), a, b, w)
    assert pointwise_aggregate(s, WeightsMode.LLM_ASSIGNED if w else WeightsMode.UNIFORM) is want


def test_aggregate_is_exact_on_float_noise():
    # the doubles 0.1 + 0.2 exceed the double 0.3, so A wins by the exact sum
    s = PointwiseScores(("x", "y", "z"), (1, 1, 0), (0, 0, 1), (0.1, 0.2, 0.3))
    assert Fraction(0.1) + Fraction(0.2) > Fraction(0.3)
    assert pointwise_aggregate(s, WeightsMode.LLM_ASSIGNED) is PreferenceLabel.A
    # dyadic weights sum exactly, so this one is a genuine tie
    s = PointwiseScores(("x", "y", "z"), (1, 1, 0), (0, 0, 1), (0.25, 0.5, 0.75))
    assert pointwise_aggregate(s, WeightsMode.LLM_ASSIGNED) is PreferenceLabel.TIE


vec = st.lists(st.integers(0, 1), min_size=1, max_size=8)


@given(st.data())
def test_aggregate_matches_rational_oracle_and_is_antisymmetric(data):
    n = data.draw(st.integers(1, 8))
    a = tuple(data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)))
    b = tuple(data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)))
    w = tuple(data.draw(st.lists(st.floats(0, 10, allow_nan=False), min_size=n, max_size=n)))
    s = PointwiseScores(tuple(f"c{i}" for i in range(n)), a, b, w)
    exact = sum(Fraction(x) * (p - q) for x, p, q in zip(w, a, b))
    want = PreferenceLabel.A if exact > 0 else PreferenceLabel.B if exact < 0 else PreferenceLabel.TIE
    got = pointwise_aggregate(s, WeightsMode.LLM_ASSIGNED)
    assert got is want
    assert pointwise_aggregate(s.swapped(), WeightsMode.LLM_ASSIGNED) is swap_label(got)


def test_scores_validation():
    with pytest.raises(ValueError):
        PointwiseScores(("c1",), (1, 0), (0,))
    with pytest.raises(ValueError):
        PointwiseScores(("c1",), (1,), (0,), (-1.0,))


def test_normalize_weights():
    assert normalize_weights([2, -1, 2]) == (0.5, 0.0, 0.5)
    assert normalize_weights([0, 0]) == (0.5, 0.5)
    assert normalize_weights([float("nan"), 1]) == (0.0, 1.0)
    assert math.isclose(sum(normalize_weights([0.3, 0.3, 0.3])), 1.0)


def test_assign_weights_paths():
    inst = make_instance(0)
    ctx, _ = scripted_ctx([rule("weight_assignment", {"weights": [{"criterion_id": "c1", "weight": 3}]})])
    assert assign_weights(ctx, inst, crits(2)) == (1.0, 0.0)
    ctx, _ = scripted_ctx([rule("weight_assignment", "bad")])
    assert assign_weights(ctx, inst, crits(4)) == (0.25,) * 4


def test_pointwise_decision_methods():
    s = PointwiseScores(("c1", "c2"), (1, 0), (0, 1), (0.9, 0.1))
    assert pointwise_decision(s, WeightsMode.UNIFORM).method is DecisionMethod.POINTWISE_UNIFORM
    d = pointwise_decision(s, WeightsMode.LLM_ASSIGNED)
    assert d.winner is PreferenceLabel.A and d.method is DecisionMethod.POINTWISE_WEIGHTED


def test_pointwise_final_judge_sees_yes_no_rows():
    ctx, backend = scripted_ctx([rule("final_judge", "bad")])
    s = PointwiseScores(("c1", "c2"), (1, 0), (0, 0))
    d = pointwise_final_judge(ctx, make_instance(0), crits(2), s, G)
    assert '"A_satisfies": "YES"' in backend.requests[0].prompt_text
    assert d.winner is PreferenceLabel.A and d.method is DecisionMethod.MAJORITY_FALLBACK
