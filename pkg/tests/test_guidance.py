import json

import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_dataset, make_instance, rule, scripted_ctx, synthetic_ctx
from pairjudge.core import Aspect, PreferenceLabel, Stage, TaskCategory
from pairjudge.guidance import (
    JUDGE_FAILED,
    ArtifactHashMismatch,
    BudgetTooSmall,
    GuidanceArtifact,
    GuidanceRecord,
    HumanRationale,
    LeakageError,
    MissingHumanLabel,
    SynthesisFailed,
    aggregate_stats,
    downsample,
    estimate_tokens,
    format_sample_cases,
    manifest_path,
    prepare_record,
    reconstruct_human_rationale,
    reference_artifact,
    run_monolithic,
    split_hash,
    synthesize_guidance,
)
from pairjudge.prompts import GLOBAL_GUIDANCE_SENTINEL, CATEGORY_GUIDANCE_SENTINEL

NO_G = (GLOBAL_GUIDANCE_SENTINEL, CATEGORY_GUIDANCE_SENTINEL)
CATS = list(TaskCategory)


def record(k, cat=None, size=100, mono="A", human="A"):
    return GuidanceRecord(
        f"r{k:03d}", cat or CATS[k % 6], "x" * size, "a", "b", PreferenceLabel(mono), "judge says",
        PreferenceLabel(human), {Aspect.CORRECTNESS: PreferenceLabel.B, Aspect.EFFICIENCY: None},
        HumanRationale("because of edge cases", ("f",), "correctness", {}, ("correctness",)),
    )


def test_artifact_is_immutable_and_complete():
    art = reference_artifact()
    with pytest.raises(TypeError):
        art.stage_guidance[Stage.GENERATION] = "x"
    d = art.content_dict()
    del d["category_specific_guidance"]["web_development"]
    with pytest.raises(Exception):
        GuidanceArtifact.from_dict(d)


def test_artifact_save_load_with_sidecar(tmp_path):
    art = reference_artifact()
    p = art.save(tmp_path / "guide.json")
    side = json.loads(manifest_path(p).read_text())
    assert side["content_hash"] == art.content_hash
    assert GuidanceArtifact.load(p) == art
    # editing the guidance text breaks the sidecar check
    data = json.loads(p.read_text())
    data["final_judging_guidance"] += " edited"
    p.write_text(json.dumps(data))
    with pytest.raises(ArtifactHashMismatch):
        GuidanceArtifact.load(p)


def test_artifact_recorded_hash_is_verified():
    ctx, _ = synthetic_ctx()
    art = synthesize_guidance(ctx, [record(0)], {"r000"}, created_at="2026-01-01T00:00:00+00:00")
    d = art.to_dict()
    assert d["provenance"]["content_hash"] == art.content_hash
    d["key_divergence_patterns"] = ["changed"]
    with pytest.raises(ArtifactHashMismatch):
        GuidanceArtifact.from_dict(d)
    assert GuidanceArtifact.from_dict(d, verify=False).key_divergence_patterns == ("changed",)


def test_hash_ignores_key_order():
    art = reference_artifact()
    d = art.content_dict()
    shuffled = dict(reversed(list(d.items())))
    assert GuidanceArtifact.from_dict(shuffled).content_hash == art.content_hash


def test_monolithic_success_and_failure(instance):
    ctx, _ = scripted_ctx([rule("monolithic_judge", {"Overall": {"winner": "B", "reasoning": "r"}})])
    assert run_monolithic(ctx, instance, NO_G) == (PreferenceLabel.B, "r")
    ctx, _ = scripted_ctx([rule("monolithic_judge", "x")])
    assert run_monolithic(ctx, instance, NO_G) == (PreferenceLabel.TIE, JUDGE_FAILED)


def test_human_rationale_prompt_and_word_warning(instance):
    ctx, backend = synthetic_ctx()
    hr = reconstruct_human_rationale(ctx, instance)
    assert not hr.flagged and hr.reasoning and not ctx.warnings
    text = backend.requests[0].prompt_text
    assert f"**Human Overall Vote:** {instance.human_overall.value}" in text
    assert '"efficiency": null' in text

    short = {"reasoning": "too short", "key_factors": [], "primary_aspect": "correctness",
             "aspect_analysis": {a: {"vote": None, "importance": "low", "explanation": ""}
                                 for a in ("correctness", "efficiency", "explainability",
                                           "maintainability", "ui_ux_design")},
             "decisive_aspects": []}
    ctx, _ = scripted_ctx([rule("human_rationale", short)])
    reconstruct_human_rationale(ctx, instance)
    assert any("2 words" in w for w in ctx.warnings)


def test_human_rationale_failure_gives_stub(instance):
    ctx, _ = scripted_ctx([rule("human_rationale", "no")])
    assert reconstruct_human_rationale(ctx, instance).flagged


def test_missing_human_label_rejected():
    ctx, _ = synthetic_ctx()
    with pytest.raises(MissingHumanLabel):
        prepare_record(ctx, make_instance(0, human_overall=None), NO_G)


def test_record_round_trip(instance):
    ctx, _ = synthetic_ctx()
    rec = prepare_record(ctx, instance, NO_G)
    assert GuidanceRecord.from_dict(json.loads(rec.to_json())) == rec
    assert rec.human_label is instance.human_overall


def test_downsample_budget_and_order():
    recs = [record(k, size=400 + 37 * k) for k in range(30)]
    budget = sum(estimate_tokens(r) for r in recs) // 3
    out = downsample(recs, budget, seed=1)
    assert sum(estimate_tokens(r) for r in out) <= budget
    assert {r.category for r in out} == set(CATS)
    idx = [recs.index(r) for r in out]
    assert idx == sorted(idx)
    assert downsample(recs, budget, seed=1) == out
    assert downsample(recs, 10**9, seed=0) == recs


def test_downsample_budget_too_small():
    with pytest.raises(BudgetTooSmall):
        downsample([record(0, size=1000)], 5, seed=0)
    with pytest.raises(ValueError):
        downsample([record(0)], 0, seed=0)


@settings(max_examples=50, deadline=None)
@given(sizes=st.lists(st.integers(1, 2000), min_size=1, max_size=25), budget=st.integers(400, 8000),
       seed=st.integers(0, 99))
def test_downsample_never_exceeds_budget(sizes, budget, seed):
    recs = [record(k, size=s) for k, s in enumerate(sizes)]
    try:
        out = downsample(recs, budget, seed)
    except BudgetTooSmall:
        assert min(estimate_tokens(r) for r in recs) > budget
        return
    assert sum(estimate_tokens(r) for r in out) <= budget
    assert out


def test_aggregate_stats_and_sample_cases():
    recs = [record(0, mono="A", human="A"), record(1, mono="B", human="A"), record(2, cat=CATS[0], human="Tie")]
    stats = aggregate_stats(recs)
    assert stats["total_records"] == 3
    assert stats["judge_human_agreement_pct"] == pytest.approx(33.3)
    assert stats["human_overall_distribution"] == {"A": 2, "Tie": 1}
    assert stats["human_aspect_vote_distribution"]["efficiency"]["missing"] == 3
    text = format_sample_cases(recs, char_cap=20)
    assert text.index("DISAGREE") < text.index("[AGREE]")
    assert "truncated 80 chars" in text


def test_leakage_checked_before_any_call():
    ctx, backend = synthetic_ctx()
    with pytest.raises(LeakageError):
        synthesize_guidance(ctx, [record(0), record(1)], {"r000"})
    assert backend.requests == []


def test_synthesis_provenance_and_model_override():
    ctx, backend = synthetic_ctx()
    recs = [record(k) for k in range(6)]
    ids = {r.instance_ref for r in recs} | {"unused"}
    art = synthesize_guidance(ctx, recs, ids, synthesizer="big-model", created_at="t0")
    assert backend.requests[0].model_id == "big-model"
    assert art.provenance.record_count == 6 and art.provenance.train_split_hash == split_hash(ids)
    assert art.content_hash == reference_artifact().content_hash
    again = synthesize_guidance(synthetic_ctx()[0], recs, ids, synthesizer="big-model", created_at="t0")
    assert again.to_dict() == art.to_dict()


def test_synthesis_failure_raises():
    ctx, _ = scripted_ctx([rule("guidance_synthesis", "nah")])
    with pytest.raises(SynthesisFailed):
        synthesize_guidance(ctx, [record(0)], {"r000"})
    with pytest.raises(SynthesisFailed):
        synthesize_guidance(ctx, [], set())
