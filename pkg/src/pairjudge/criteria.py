"""Criterion generation and batched pairwise criterion judging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .context import JudgeContext
from .core import (
    Aspect,
    Confidence,
    Criterion,
    CriterionJudgment,
    EvidenceBasis,
    Instance,
    Order,
    Origin,
    PairJudgeError,
    Verdict,
)
from .gateway import StructuredOutputFailed
from .prompts import TemplateId, format_criteria_list, guidance_bindings, pair_bindings

TAG_GENERATION = "criterion_generation"
TAG_JUDGE_FORWARD = "criterion_judging_forward"
TAG_JUDGE_BACKWARD = "criterion_judging_backward"
TAG_REJUDGE = "criterion_rejudging"

JUDGING_FAILED = "judging failed"
NOT_RETURNED = "no judgment returned for this criterion"


class GenerationFailed(PairJudgeError):
    pass


@dataclass(frozen=True)
class CriterionSet:
    criteria: tuple[Criterion, ...]
    generation_transcript_ref: str
    warnings: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.criteria)


@dataclass(frozen=True)
class JudgmentBatch:
    judgments: tuple[CriterionJudgment, ...]
    order: Order
    failed: bool = False
    warnings: tuple[str, ...] = ()
    failed_ids: frozenset[str] = frozenset()

    def by_id(self) -> dict[str, CriterionJudgment]:
        return {j.criterion_id: j for j in self.judgments}


def _dedupe(tokens: Iterable[str]) -> tuple[EvidenceBasis, ...]:
    seen: dict[str, None] = {}
    for t in tokens:
        seen.setdefault(t, None)
    return tuple(EvidenceBasis(t) for t in seen)


def generate_criteria(
    ctx: JudgeContext,
    instance: Instance,
    guidance: tuple[str, str],
    *,
    count_range: tuple[int, int] = (16, 20),
) -> CriterionSet:
    bindings = {
        **pair_bindings(instance, attach_screenshots=ctx.attach_screenshots),
        **guidance_bindings(guidance),
    }
    try:
        value = ctx.call(TemplateId.CRITERION_GENERATION, bindings, TAG_GENERATION)
    except StructuredOutputFailed as exc:
        raise GenerationFailed(f"{instance.id}: criterion generation failed: {exc}") from exc
    ref = ctx.log[-1]["key"] if ctx.log else ""

    raw = value["criteria"]
    warnings: list[str] = []
    expected = [f"c{i}" for i in range(1, len(raw) + 1)]
    if [e["id"] for e in raw] != expected:
        warnings.append(f"{instance.id}: criterion ids were not sequential; renumbered c1..c{len(raw)}")
    criteria = tuple(
        Criterion(
            id=cid,
            statement=e["criterion"].strip(),
            rationale=e["rationale"].strip(),
            evidence_basis=_dedupe(e["evidence_basis"]),
            origin=Origin.GENERATED,
        )
        for cid, e in zip(expected, raw)
    )
    lo, hi = count_range
    if not lo <= len(criteria) <= hi:
        warnings.append(
            f"{instance.id}: CountOutOfRange: {len(criteria)} criteria outside {lo}-{hi}"
        )
    for w in warnings:
        ctx.warn(w)
    return CriterionSet(criteria, ref, tuple(warnings))


def _fill(criterion_id: str, order: Order, rationale: str) -> CriterionJudgment:
    return CriterionJudgment(
        criterion_id=criterion_id,
        verdict=Verdict.INSUFFICIENT,
        confidence=Confidence.LOW,
        rationale=rationale,
        evidence_used=(),
        mapped_aspect=Aspect.OTHERS,
        order=order,
    )


def normalize_judgments(
    criteria: Sequence[Criterion], raw_entries: Sequence[dict], order: Order = Order.FORWARD
) -> JudgmentBatch:
    """Align raw judge entries with ``criteria``; output order is always criteria order.

    Unknown ids are dropped, the first of duplicate entries wins, and missing
    criteria are filled with insufficient evidence at low confidence.
    """
    wanted = {c.id for c in criteria}
    found: dict[str, dict] = {}
    warnings: list[str] = []
    for entry in raw_entries:
        cid = entry["criterion_id"]
        if cid not in wanted:
            warnings.append(f"dropped judgment for unknown criterion {cid!r}")
        elif cid in found:
            warnings.append(f"duplicate judgment for {cid!r}; kept the first")
        else:
            found[cid] = entry
    judgments = []
    for c in criteria:
        entry = found.get(c.id)
        if entry is None:
            warnings.append(f"missing judgment for {c.id!r}; filled insufficient_evidence")
            judgments.append(_fill(c.id, order, NOT_RETURNED))
            continue
        judgments.append(
            CriterionJudgment(
                criterion_id=c.id,
                verdict=Verdict(entry["judgment"]),
                confidence=Confidence(entry["confidence"]),
                rationale=entry.get("rationale", ""),
                evidence_used=_dedupe(entry.get("evidence_basis", ())),
                mapped_aspect=Aspect(entry["mapped_aspect"]),
                order=order,
            )
        )
    return JudgmentBatch(tuple(judgments), order, warnings=tuple(warnings))


def _judge_call(
    ctx: JudgeContext,
    instance: Instance,
    criteria: Sequence[Criterion],
    guidance: tuple[str, str],
    order: Order,
    tag: str,
) -> JudgmentBatch:
    bindings = {
        **pair_bindings(
            instance,
            swapped=order is Order.BACKWARD,
            attach_screenshots=ctx.attach_screenshots,
        ),
        **guidance_bindings(guidance),
        "CRITERIA_LIST": format_criteria_list(criteria),
    }
    try:
        value = ctx.call(TemplateId.PAIRWISE_CRITERION_JUDGING, bindings, tag)
    except StructuredOutputFailed as exc:
        msg = f"{instance.id}: {tag} failed for {len(criteria)} criteria: {exc.last_error}"
        return JudgmentBatch(
            tuple(_fill(c.id, order, JUDGING_FAILED) for c in criteria),
            order,
            failed=True,
            warnings=(msg,),
            failed_ids=frozenset(c.id for c in criteria),
        )
    return normalize_judgments(criteria, value["criterion_results"], order)


def judge_criteria(
    ctx: JudgeContext,
    instance: Instance,
    criteria: Sequence[Criterion],
    guidance: tuple[str, str],
    order: Order = Order.FORWARD,
    *,
    batching: str = "batched",
    tag: str | None = None,
) -> JudgmentBatch:
    """Pairwise verdicts for ``criteria``.

    Backward order presents the responses (and their evidence) swapped while
    keeping the criterion text; its verdicts are returned raw, in the swapped
    frame.
    """
    if not criteria:
        raise ValueError("judge_criteria needs at least one criterion")
    if tag is None:
        tag = TAG_JUDGE_FORWARD if order is Order.FORWARD else TAG_JUDGE_BACKWARD
    if batching == "batched":
        batch = _judge_call(ctx, instance, criteria, guidance, order, tag)
    elif batching == "per_criterion":
        parts = [_judge_call(ctx, instance, [c], guidance, order, tag) for c in criteria]
        batch = JudgmentBatch(
            tuple(j for p in parts for j in p.judgments),
            order,
            failed=all(p.failed for p in parts),
            warnings=tuple(w for p in parts for w in p.warnings),
            failed_ids=frozenset().union(*(p.failed_ids for p in parts)),
        )
    else:
        raise ValueError(f"unknown batching mode {batching!r}")
    for w in batch.warnings:
        ctx.warn(f"{instance.id}: {w}" if not w.startswith(instance.id) else w)
    return batch
