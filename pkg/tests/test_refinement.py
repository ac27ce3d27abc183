import json

from hypothesis import HealthCheck, given, settings, strategies as st

from conftest import make_instance, rule, scripted_ctx
from pairjudge.core import Aspect, Confidence, Criterion, CriterionJudgment, EvidenceBasis, Origin, Verdict
from pairjudge.criteria import JudgmentBatch, Order, judge_criteria
from pairjudge.gateway import Gateway, MockBackend, MockRule, RunStore
from pairjudge.context import JudgeContext
from pairjudge.mock import SyntheticJudge
from pairjudge.refinement import (
    CallCounter,
    RefinementState,
    decompose_batch,
    filter_redundant_batch,
    plain_loop_call_count,
    refine,
    select_ties,
)

G = ("g", "c")


def crits(n):
    return [Criterion(f"c{i}", f"check {i}", "", (EvidenceBasis.CODE,)) for i in range(1, n + 1)]


def state_with(verdicts):
    cs = crits(len(verdicts))
    js = tuple(CriterionJudgment(c.id, v, Confidence.HIGH, "same", (), Aspect.CORRECTNESS)
               for c, v in zip(cs, verdicts))
    return RefinementState.initial(cs, JudgmentBatch(js, Order.FORWARD))


def decomp(*parents, n=2):
    return {"decompositions": [
        {"parent_id": p, "sub_criteria": [{"criterion": f"{p} part {k}", "evidence_basis": ["code"]}
                                          for k in range(n)]}
        for p in parents]}


def flags(key, ids, value=False):
    return {"results": [{"id": i, key: value} for i in ids]}


def rejudge(ids, v="A"):
    return {"criterion_results": [{"criterion_id": i, "judgment": v, "confidence": "high",
                                   "mapped_aspect": "correctness"} for i in ids]}


def test_plain_loop_oracle():
    assert plain_loop_call_count(16795, 62218, 17558) == 96571
    assert plain_loop_call_count(0, 0, 0) == 0


def test_single_iteration_replaces_parent_with_children():
    ctx, backend = scripted_ctx([
        rule("tie_decomposition", decomp("c2")),
        rule("redundancy_filter", flags("redundant", ["t1", "t2"])),
        rule("conflict_filter", flags("conflicting", ["t1", "t2"])),
        rule("criterion_rejudging", rejudge(["t1", "t2"])),
    ])
    st0 = state_with([Verdict.A, Verdict.TIE, Verdict.B])
    st1, counter = refine(ctx, make_instance(0), st0, G, max_iterations=2)
    assert [c.id for c in st1.active_criteria] == ["c1", "t1", "t2", "c3"]
    assert st1.retired_parents == {"c2"}
    assert st1.all_criteria["t1"].parent_id == "c2"
    assert (counter.decomposition_calls, counter.redundancy_calls, counter.conflict_calls,
            counter.rejudge_calls) == (1, 1, 1, 1)
    assert counter.plain_loop_equivalent == 1 + 2 + 2
    assert len(st1.rounds) == 1  # children are at depth 1, so nothing more to do


def test_filter_failure_drops_all_candidates_and_parent_stays():
    ctx, backend = scripted_ctx([
        rule("tie_decomposition", decomp("c1")),
        rule("redundancy_filter", "broken"),
    ])
    st1, counter = refine(ctx, make_instance(0), state_with([Verdict.TIE, Verdict.A]), G)
    assert [c.id for c in st1.active_criteria] == ["c1", "c2"]
    assert counter.conflict_calls == 0 and counter.rejudge_calls == 0
    assert any("dropped all" in w for w in ctx.warnings)
    # c1 was attempted, so the second iteration has nothing to do
    assert len(st1.rounds) == 1


def test_missing_filter_result_drops_that_candidate():
    ctx, _ = scripted_ctx([rule("redundancy_filter", flags("redundant", ["t1"]))])
    cands = [Criterion(f"t{i}", "x", "", (EvidenceBasis.CODE,), Origin.REFINED, "c1") for i in (1, 2)]
    assert [c.id for c in filter_redundant_batch(ctx, crits(1), cands)] == ["t1"]


def test_empty_candidates_make_no_call():
    ctx, backend = scripted_ctx()
    assert filter_redundant_batch(ctx, crits(2), []) == []
    assert backend.requests == []


def test_decomposition_truncates_and_warns():
    ctx, _ = scripted_ctx([rule("tie_decomposition", {
        "decompositions": decomp("c1", n=3)["decompositions"] + decomp("zz")["decompositions"]})])
    st0 = state_with([Verdict.TIE])
    out = decompose_batch(ctx, make_instance(0), [(c, st0.judgments[c.id]) for c in st0.active_criteria], [], 5)
    assert [c.id for c in out] == ["t5", "t6"]
    assert any("kept the first two" in w for w in ctx.warnings)
    assert any("unknown parent zz" in w for w in ctx.warnings)


def test_decomposition_failure_leaves_ties():
    ctx, backend = scripted_ctx([rule("tie_decomposition", "nope")])
    st1, counter = refine(ctx, make_instance(0), state_with([Verdict.TIE]), G)
    assert [c.id for c in st1.active_criteria] == ["c1"]
    assert counter.batched_total == 1 and counter.redundancy_calls == 0


def test_depth_limit_and_no_ties_short_circuit():
    st0 = state_with([Verdict.A, Verdict.B])
    assert select_ties(st0) == []
    ctx, backend = scripted_ctx()
    _, counter = refine(ctx, make_instance(0), st0, G)
    assert backend.requests == [] and counter == CallCounter()
    st_tie = state_with([Verdict.TIE])
    assert select_ties(st_tie, depth_limit=0) == []


def test_second_iteration_refines_tied_children_at_depth_two():
    def seq(tag, *values):
        return MockRule(response=[json.dumps(v) for v in values], tag=tag)

    ctx, backend = scripted_ctx([
        seq("tie_decomposition", decomp("c1", n=1), decomp("t1", n=1)),
        seq("redundancy_filter", flags("redundant", ["t1"]), flags("redundant", ["t2"])),
        seq("conflict_filter", flags("conflicting", ["t1"]), flags("conflicting", ["t2"])),
        seq("criterion_rejudging", rejudge(["t1"], "tie"), rejudge(["t2"], "B")),
    ])
    st1, counter = refine(ctx, make_instance(0), state_with([Verdict.TIE]), G,
                          max_iterations=2, depth_limit=2)
    assert [c.id for c in st1.active_criteria] == ["t2"]
    assert st1.depth("t2") == 2 and st1.retired_parents == {"c1", "t1"}
    assert counter.decomposition_calls == 2 and len(st1.rounds) == 2


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 10_000), margin=st.floats(0.0, 0.8), red=st.floats(0, 1),
       conf=st.floats(0, 1), kids=st.integers(1, 3), iters=st.integers(0, 3))
def test_batched_never_exceeds_plain_loop(seed, margin, red, conf, kids, iters):
    judge = SyntheticJudge(seed=seed, n_criteria=8, tie_margin=margin, redundancy_rate=red,
                           conflict_rate=conf, children_per_tie=kids)
    backend = MockBackend(judge)
    ctx = JudgeContext(Gateway(backend, RunStore()))
    inst = make_instance(seed % 7)
    cs = crits(8)
    st0 = RefinementState.initial(cs, judge_criteria(ctx, inst, cs, G))
    st1, counter = refine(ctx, inst, st0, G, max_iterations=iters)
    assert counter.batched_total <= counter.plain_loop_equivalent
    assert counter.batched_total <= 3 * len(st1.rounds)
    assert len(st1.rounds) <= iters
    # every active criterion has a judgment and no retired parent is active
    assert all(c.id in st1.judgments for c in st1.active_criteria)
    assert not {c.id for c in st1.active_criteria} & st1.retired_parents
