"""Final preference decisions and the aggregators they are compared against."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .context import JudgeContext
from .core import Criterion, Instance, PreferenceLabel, Verdict
from .gateway import StructuredOutputFailed
from .prompts import (
    NO_EVIDENCE_TEXT,
    TemplateId,
    format_criteria_list,
    format_criterion_results,
    guidance_bindings,
    pair_bindings,
    single_bindings,
)
from .swap import EvidenceSet

TAG_FINAL = "final_judge"
TAG_POINTWISE = "pointwise_judging"
TAG_WEIGHTS = "weight_assignment"


class DecisionMethod(str, enum.Enum):
    FINAL_JUDGE = "final_judge"
    MAJORITY_FALLBACK = "majority_fallback"
    POINTWISE_UNIFORM = "pointwise_uniform"
    POINTWISE_WEIGHTED = "pointwise_weighted"
    MONOLITHIC = "monolithic"


class WeightsMode(str, enum.Enum):
    UNIFORM = "uniform"
    LLM_ASSIGNED = "llm_assigned"


@dataclass(frozen=True)
class FinalDecision:
    winner: PreferenceLabel
    reasoning: str
    method: DecisionMethod

    def to_dict(self) -> dict:
        return {"winner": self.winner.value, "reasoning": self.reasoning, "method": self.method.value}

    @classmethod
    def from_dict(cls, data: dict) -> "FinalDecision":
        return cls(PreferenceLabel(data["winner"]), data["reasoning"], DecisionMethod(data["method"]))


def majority_fallback(evidence: EvidenceSet | Iterable[Verdict]) -> PreferenceLabel:
    """Strict majority of A vs B verdicts; ties and insufficient evidence are ignored."""
    verdicts = evidence.kept_verdicts if isinstance(evidence, EvidenceSet) else list(evidence)
    a = sum(v is Verdict.A for v in verdicts)
    b = sum(v is Verdict.B for v in verdicts)
    if a > b:
        return PreferenceLabel.A
    if b > a:
        return PreferenceLabel.B
    return PreferenceLabel.TIE


def _final_call(
    ctx: JudgeContext,
    instance: Instance,
    criterion_results: str,
    guidance: tuple[str, str],
    fallback_verdicts: Sequence[Verdict],
) -> FinalDecision:
    bindings = {
        **pair_bindings(instance, attach_screenshots=ctx.attach_screenshots),
        **guidance_bindings(guidance),
        "CRITERION_RESULTS": criterion_results,
    }
    try:
        value = ctx.call(TemplateId.FINAL_JUDGE, bindings, TAG_FINAL)
    except StructuredOutputFailed as exc:
        winner = majority_fallback(fallback_verdicts)
        ctx.warn(f"{instance.id}: final judge failed, majority fallback -> {winner.value}")
        return FinalDecision(
            winner,
            f"final judge failed ({exc.last_error}); majority of kept criterion verdicts",
            DecisionMethod.MAJORITY_FALLBACK,
        )
    overall = value["Overall"]
    return FinalDecision(
        PreferenceLabel(overall["winner"]), overall["reasoning"], DecisionMethod.FINAL_JUDGE
    )


def final_judge(
    ctx: JudgeContext, instance: Instance, evidence: EvidenceSet, guidance: tuple[str, str]
) -> FinalDecision:
    """Overall preference from the kept criterion evidence (an empty set still gets a call)."""
    return _final_call(
        ctx, instance, format_criterion_results(evidence.kept), guidance, evidence.kept_verdicts
    )


# ---------------------------------------------------------------------------
# pointwise baselines


@dataclass(frozen=True)
class PointwiseScores:
    criterion_ids: tuple[str, ...]
    score_a: tuple[int, ...]
    score_b: tuple[int, ...]
    weights: tuple[float, ...] = ()
    degraded: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        n = len(self.criterion_ids)
        if len(self.score_a) != n or len(self.score_b) != n:
            raise ValueError("score vectors must match the criterion count")
        if not self.weights:
            object.__setattr__(self, "weights", (1.0,) * n)
        if len(self.weights) != n or any(w < 0 for w in self.weights):
            raise ValueError("weights must be non-negative, one per criterion")

    def with_weights(self, weights: Sequence[float]) -> "PointwiseScores":
        return PointwiseScores(
            self.criterion_ids, self.score_a, self.score_b, tuple(weights), self.degraded
        )

    def swapped(self) -> "PointwiseScores":
        return PointwiseScores(
            self.criterion_ids, self.score_b, self.score_a, self.weights, self.degraded
        )

    def to_dict(self) -> dict:
        return {
            "criterion_ids": list(self.criterion_ids),
            "score_a": list(self.score_a),
            "score_b": list(self.score_b),
            "weights": list(self.weights),
            "degraded": list(self.degraded),
        }


def pointwise_aggregate(
    scores: PointwiseScores, weights_mode: WeightsMode = WeightsMode.UNIFORM
) -> PreferenceLabel:
    """Compare weighted YES counts; equal sums give Tie.

    The difference is summed term by term so criteria where both sides
    agree contribute exactly zero, and the sign is invariant to positive
    rescaling of the weights.
    """
    if weights_mode is WeightsMode.UNIFORM:
        weights: Sequence[float] = (1.0,) * len(scores.criterion_ids)
    else:
        weights = scores.weights
    diff = math.fsum(w * (a - b) for w, a, b in zip(weights, scores.score_a, scores.score_b))
    if diff > 0:
        return PreferenceLabel.A
    if diff < 0:
        return PreferenceLabel.B
    return PreferenceLabel.TIE


def _score_side(
    ctx: JudgeContext,
    instance: Instance,
    criteria: Sequence[Criterion],
    guidance: tuple[str, str],
    side: str,
) -> tuple[tuple[int, ...], bool]:
    bindings = {
        **single_bindings(instance, side, attach_screenshots=ctx.attach_screenshots),
        **guidance_bindings(guidance),
        "CRITERIA_LIST": format_criteria_list(criteria),
    }
    try:
        value = ctx.call(TemplateId.POINTWISE_CRITERION_JUDGING, bindings, TAG_POINTWISE)
    except StructuredOutputFailed as exc:
        ctx.warn(f"{instance.id}: pointwise judging of {side} failed, scored 0: {exc.last_error}")
        return (0,) * len(criteria), True
    decisions: dict[str, str] = {}
    for entry in value["criterion_results"]:
        decisions.setdefault(entry["criterion_id"], entry["decision"])
    out = []
    for c in criteria:
        if c.id not in decisions:
            ctx.warn(f"{instance.id}: no pointwise decision for {c.id} on {side}; scored 0")
        out.append(1 if decisions.get(c.id) == "YES" else 0)
    return tuple(out), False


def pointwise_judge(
    ctx: JudgeContext, instance: Instance, criteria: Sequence[Criterion], guidance: tuple[str, str]
) -> PointwiseScores:
    """YES/NO per criterion for each response on its own: exactly two calls."""
    if not criteria:
        raise ValueError("pointwise_judge needs at least one criterion")
    a, fail_a = _score_side(ctx, instance, criteria, guidance, "A")
    b, fail_b = _score_side(ctx, instance, criteria, guidance, "B")
    degraded = tuple(s for s, f in (("A", fail_a), ("B", fail_b)) if f)
    return PointwiseScores(tuple(c.id for c in criteria), a, b, degraded=degraded)


def normalize_weights(raw: Sequence[float]) -> tuple[float, ...]:
    """Clip at zero and rescale to sum 1; all-zero input becomes uniform."""
    clipped = [max(0.0, float(w)) if math.isfinite(w) else 0.0 for w in raw]
    total = math.fsum(clipped)
    if total <= 0:
        return tuple(1.0 / len(clipped) for _ in clipped) if clipped else ()
    return tuple(w / total for w in clipped)


def assign_weights(
    ctx: JudgeContext, instance: Instance, criteria: Sequence[Criterion]
) -> tuple[float, ...]:
    bindings = {"INSTRUCTION": instance.instruction, "CRITERIA_LIST": format_criteria_list(criteria)}
    uniform = normalize_weights([1.0] * len(criteria))
    try:
        value = ctx.call(TemplateId.WEIGHT_ASSIGNMENT, bindings, TAG_WEIGHTS)
    except StructuredOutputFailed as exc:
        ctx.warn(f"{instance.id}: weight assignment failed, using uniform: {exc.last_error}")
        return uniform
    given: dict[str, float] = {}
    for entry in value["weights"]:
        given.setdefault(entry["criterion_id"], entry["weight"])
    missing = [c.id for c in criteria if c.id not in given]
    if missing:
        ctx.warn(f"{instance.id}: no weight for {missing}; weighted 0")
    return normalize_weights([given.get(c.id, 0.0) for c in criteria])


def pointwise_decision(scores: PointwiseScores, weights_mode: WeightsMode) -> FinalDecision:
    if weights_mode is WeightsMode.UNIFORM:
        weights = (1.0,) * len(scores.criterion_ids)
        method = DecisionMethod.POINTWISE_UNIFORM
    else:
        weights = scores.weights
        method = DecisionMethod.POINTWISE_WEIGHTED
    sa = math.fsum(w * s for w, s in zip(weights, scores.score_a))
    sb = math.fsum(w * s for w, s in zip(weights, scores.score_b))
    winner = pointwise_aggregate(scores, weights_mode)
    return FinalDecision(winner, f"weighted criterion score A={sa:.4g} vs B={sb:.4g}", method)


def format_pointwise_results(criteria: Sequence[Criterion], scores: PointwiseScores) -> str:
    if not criteria:
        return NO_EVIDENCE_TEXT
    rows = [
        {
            "criterion_id": c.id,
            "criterion": c.statement,
            "A_satisfies": "YES" if a else "NO",
            "B_satisfies": "YES" if b else "NO",
        }
        for c, a, b in zip(criteria, scores.score_a, scores.score_b)
    ]
    return json.dumps(rows, indent=2, ensure_ascii=False)


def pointwise_final_judge(
    ctx: JudgeContext,
    instance: Instance,
    criteria: Sequence[Criterion],
    scores: PointwiseScores,
    guidance: tuple[str, str],
) -> FinalDecision:
    """Final pairwise judge reading pointwise YES/NO results instead of a weighted sum."""
    # fallback: criteria satisfied by exactly one side count as a win for it
    fallback = [
        Verdict.A if a > b else Verdict.B if b > a else Verdict.TIE
        for a, b in zip(scores.score_a, scores.score_b)
    ]
    return _final_call(
        ctx, instance, format_pointwise_results(criteria, scores), guidance, fallback
    )
