import itertools

import pytest
from hypothesis import given, strategies as st

from conftest import make_instance, rule, scripted_ctx, synthetic_ctx
from pairjudge.core import Aspect, Confidence, Criterion, CriterionJudgment, EvidenceBasis, Verdict
from pairjudge.criteria import Order, judge_criteria
from pairjudge.swap import (
    BiasLevel,
    BiasStage,
    EmptyInput,
    EvidenceSet,
    bias_from_percentages,
    bias_from_verdicts,
    bias_stats,
    consistency_keep,
    partition,
    pool_shrink,
    sample_majority,
    scf_filter,
)

G = ("g", "c")
V = list(Verdict)


def crits(n):
    return [Criterion(f"c{i}", f"check {i}", "", (EvidenceBasis.CODE,)) for i in range(1, n + 1)]


def j(cid, v, order=Order.FORWARD):
    return CriterionJudgment(cid, v, Confidence.HIGH, "", (), Aspect.CORRECTNESS, order)


def test_keep_table_has_four_entries():
    kept = [(f, b) for f, b in itertools.product(V, V) if consistency_keep(f, b)]
    assert len(kept) == 4
    assert not consistency_keep(Verdict.A, Verdict.A)
    assert not consistency_keep(Verdict.TIE, Verdict.INSUFFICIENT)


def test_partition_examples():
    cs = crits(4)
    fwd = [(c, j(c.id, v)) for c, v in zip(cs, [Verdict.A, Verdict.B, Verdict.TIE, Verdict.A])]
    bwd = {c.id: j(c.id, v, Order.BACKWARD) for c, v in zip(cs, [Verdict.B, Verdict.B, Verdict.TIE, Verdict.TIE])}
    ev = partition(fwd, bwd)
    assert [c.id for c, _ in ev.kept] == ["c1", "c3"]
    assert [(c.id, f, b) for c, f, b in ev.dropped] == [("c2", Verdict.B, Verdict.B), ("c4", Verdict.A, Verdict.TIE)]
    assert partition(fwd, bwd, unchecked=frozenset({"c2"})).kept[1][0].id == "c2"


def test_filter_empty_input_makes_no_call():
    ctx, backend = synthetic_ctx()
    ev, bwd = scf_filter(ctx, make_instance(0), [], G)
    assert ev.kept == [] and ev.scf_applied and backend.requests == []


def test_failed_backward_keeps_everything_unfiltered():
    ctx, _ = scripted_ctx([rule("criterion_judging_backward", "broken")])
    cs = crits(3)
    pairs = [(c, j(c.id, Verdict.A)) for c in cs]
    ev, _ = scf_filter(ctx, make_instance(0), pairs, G)
    assert not ev.scf_applied and len(ev.kept) == 3
    assert any("swap filtering skipped" in w for w in ctx.warnings)


def test_honest_judge_keeps_everything():
    ctx, _ = synthetic_ctx(position_bias=0.0)
    inst, cs = make_instance(3), crits(30)
    fwd = judge_criteria(ctx, inst, cs, G)
    ev, _ = scf_filter(ctx, inst, list(zip(cs, fwd.judgments)), G)
    assert ev.dropped == [] and len(ev.kept) == 30


def test_filter_result_is_invariant_to_presentation_order():
    # judging the swapped instance forward equals judging the original backward
    ctx, _ = synthetic_ctx(position_bias=0.4)
    inst, cs = make_instance(5), crits(40)
    fwd = judge_criteria(ctx, inst, cs, G)
    ev, _ = scf_filter(ctx, inst, list(zip(cs, fwd.judgments)), G)
    swapped = inst.swapped()
    fwd_s = judge_criteria(ctx, swapped, cs, G)
    ev_s, _ = scf_filter(ctx, swapped, list(zip(cs, fwd_s.judgments)), G)
    assert [c.id for c, _ in ev.kept] == [c.id for c, _ in ev_s.kept]
    from pairjudge.core import swap_verdict

    assert [swap_verdict(v) for v in ev.kept_verdicts] == ev_s.kept_verdicts


def test_evidence_set_round_trip():
    cs = crits(2)
    ev = EvidenceSet([(cs[0], j("c1", Verdict.A))], [(cs[1], Verdict.A, Verdict.A)])
    assert EvidenceSet.from_dict(ev.to_dict()) == ev


def test_bias_from_verdicts_counts_insufficient_separately():
    rep = bias_from_verdicts([[Verdict.A, Verdict.A, Verdict.B, Verdict.INSUFFICIENT], [Verdict.TIE]])
    assert rep.counts == {"A": 2, "B": 1, "Tie": 1} and rep.insufficient == 1
    assert rep.skew_pp == pytest.approx(25.0)
    assert rep.ab_ratio == 2.0


def test_ab_ratio_undefined_without_b():
    assert bias_from_verdicts([[Verdict.A]]).ab_ratio is None


def test_sample_level_uses_strict_majority():
    assert sample_majority([Verdict.A, Verdict.B]) == "Tie"
    assert sample_majority([Verdict.A, Verdict.TIE, Verdict.TIE]) == "A"
    rep = bias_from_verdicts([[Verdict.A, Verdict.B], [Verdict.B], [Verdict.A, Verdict.A, Verdict.B]],
                             BiasLevel.SAMPLE)
    assert rep.counts == {"A": 1, "B": 1, "Tie": 1}


def test_empty_inputs_raise():
    with pytest.raises(EmptyInput):
        bias_from_verdicts([])
    with pytest.raises(EmptyInput):
        bias_from_verdicts([[], []])


def test_reported_distribution_arithmetic():
    rep = bias_from_percentages(44.4, 31.5, 24.1)
    assert round(rep.skew_pp, 1) == 12.9
    assert round(rep.ab_ratio, 2) == 1.41


@given(st.lists(st.lists(st.sampled_from(V), max_size=6), min_size=1, max_size=8))
def test_swapping_every_verdict_negates_skew(groups):
    from pairjudge.core import swap_verdict

    if not any(groups):
        return
    rep = bias_from_verdicts(groups)
    mirrored = bias_from_verdicts([[swap_verdict(v) for v in g] for g in groups])
    assert mirrored.skew_pp == pytest.approx(-rep.skew_pp)


def test_pre_and_post_stats_and_pool():
    cs = crits(3)

    class R:
        def __init__(self, ev):
            self.evidence = ev

    ev1 = EvidenceSet([(cs[0], j("c1", Verdict.B))], [(cs[1], Verdict.A, Verdict.A), (cs[2], Verdict.A, Verdict.TIE)])
    ev2 = EvidenceSet([(cs[0], j("c1", Verdict.TIE))], [])
    results = [R(ev1), R(ev2), R(None)]
    pre = bias_stats(results, BiasLevel.CRITERION, BiasStage.PRE_SCF)
    post = bias_stats(results, BiasLevel.CRITERION, BiasStage.POST_SCF)
    assert pre.counts == {"A": 2, "B": 1, "Tie": 1}
    assert post.counts == {"A": 0, "B": 1, "Tie": 1}
    shrink = pool_shrink([ev1, ev2])
    assert (shrink.n_pre, shrink.n_post, shrink.dropped, shrink.disagreeing_judgments) == (4, 2, 2, 4)
    assert shrink.samples_with_drop == 1 and shrink.pct_samples_with_drop == 50.0
