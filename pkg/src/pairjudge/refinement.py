"""Batched tie-driven criterion refinement.

Criteria judged as a tie are decomposed into at most two finer sub-criteria
per parent in one structured call. The candidates then go through one batch
redundancy check and one batch conflict check, and the survivors are
re-judged together. A parent is retired only when at least one of its
children survives, so a dimension never loses all of its evidence.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

from .context import JudgeContext
from .core import Criterion, CriterionJudgment, Instance, Order, Origin, Verdict
from .criteria import TAG_REJUDGE, JudgmentBatch, _dedupe, judge_criteria
from .gateway import StructuredOutputFailed
from .prompts import TemplateId, format_rubrics, format_tied_criteria, pair_bindings

TAG_DECOMPOSE = "tie_decomposition"
TAG_REDUNDANCY = "redundancy_filter"
TAG_CONFLICT = "conflict_filter"

MAX_CHILDREN = 2


@dataclass
class CallCounter:
    decomposition_calls: int = 0
    redundancy_calls: int = 0
    conflict_calls: int = 0
    rejudge_calls: int = 0
    plain_loop_equivalent: int = 0

    @property
    def batched_total(self) -> int:
        """Decomposition plus filtering calls, the quantity a plain loop is compared against."""
        return self.decomposition_calls + self.redundancy_calls + self.conflict_calls

    def __add__(self, other: "CallCounter") -> "CallCounter":
        return CallCounter(**{k: v + getattr(other, k) for k, v in asdict(self).items()})

    def to_dict(self) -> dict:
        return asdict(self)


def plain_loop_call_count(n_tie: int, n_sub: int, n_nonred: int) -> int:
    """Calls a per-criterion loop needs: one decomposition per tied parent,
    one redundancy check per sub-criterion, one conflict check per survivor."""
    return n_tie + n_sub + n_nonred


@dataclass
class RefinementState:
    active_criteria: list[Criterion]
    judgments: dict[str, CriterionJudgment]
    iteration: int = 0
    retired_parents: set[str] = field(default_factory=set)
    attempted: set[str] = field(default_factory=set)
    all_criteria: dict[str, Criterion] = field(default_factory=dict)
    next_sub_index: int = 1
    rounds: list[dict] = field(default_factory=list)

    @classmethod
    def initial(cls, criteria: Sequence[Criterion], batch: JudgmentBatch) -> "RefinementState":
        return cls(
            active_criteria=list(criteria),
            judgments=batch.by_id(),
            all_criteria={c.id: c for c in criteria},
        )

    def depth(self, criterion_id: str) -> int:
        d = 0
        c = self.all_criteria[criterion_id]
        while c.parent_id is not None:
            d += 1
            c = self.all_criteria[c.parent_id]
        return d

    def evidence(self) -> list[tuple[Criterion, CriterionJudgment]]:
        return [(c, self.judgments[c.id]) for c in self.active_criteria]


def select_ties(state: RefinementState, depth_limit: int = 1) -> list[Criterion]:
    return [
        c
        for c in state.active_criteria
        if state.judgments[c.id].verdict is Verdict.TIE
        and c.id not in state.retired_parents
        and c.id not in state.attempted
        and state.depth(c.id) < depth_limit
    ]


def decompose_batch(
    ctx: JudgeContext,
    instance: Instance,
    tied: Sequence[tuple[Criterion, CriterionJudgment]],
    others: Sequence[Criterion],
    start_index: int = 1,
) -> list[Criterion]:
    """One structured call proposing up to two sub-criteria per tied parent.

    Candidates are numbered ``t{start_index}``, ``t{start_index+1}``, ...
    Returns an empty list when the call fails; the parents' ties then stand.
    """
    if not tied:
        raise ValueError("decompose_batch needs at least one tied criterion")
    bindings = {
        **pair_bindings(instance, attach_screenshots=ctx.attach_screenshots),
        "TIED_CRITERIA": format_tied_criteria(tied),
        "OTHER_CRITERIA": format_rubrics(others),
    }
    try:
        value = ctx.call(TemplateId.TIE_DECOMPOSITION, bindings, TAG_DECOMPOSE)
    except StructuredOutputFailed as exc:
        ctx.warn(f"{instance.id}: tie decomposition failed, ties stand: {exc.last_error}")
        return []

    by_parent: dict[str, list[dict]] = {}
    for entry in value["decompositions"]:
        pid = entry["parent_id"]
        if pid in by_parent:
            ctx.warn(f"{instance.id}: duplicate decomposition for {pid}; kept the first")
            continue
        by_parent[pid] = entry["sub_criteria"]
    parent_ids = [c.id for c, _ in tied]
    for pid in by_parent.keys() - set(parent_ids):
        ctx.warn(f"{instance.id}: decomposition for unknown parent {pid} ignored")

    out: list[Criterion] = []
    idx = start_index
    for pid in parent_ids:
        subs = by_parent.get(pid)
        if not subs:
            ctx.warn(f"{instance.id}: no sub-criteria returned for {pid}; its tie stands")
            continue
        if len(subs) > MAX_CHILDREN:
            ctx.warn(f"{instance.id}: {len(subs)} sub-criteria for {pid}; kept the first two")
            subs = subs[:MAX_CHILDREN]
        for sub in subs:
            out.append(
                Criterion(
                    id=f"t{idx}",
                    statement=sub["criterion"].strip(),
                    rationale=sub.get("rationale", "").strip(),
                    evidence_basis=_dedupe(sub["evidence_basis"]),
                    origin=Origin.REFINED,
                    parent_id=pid,
                )
            )
            idx += 1
    return out


def _filter_batch(
    ctx: JudgeContext,
    existing: Sequence[Criterion],
    candidates: Sequence[Criterion],
    tid: TemplateId,
    tag: str,
    flag: str,
) -> list[Criterion]:
    if not candidates:
        return list(candidates)
    bindings = {"EXISTING_RUBRICS": format_rubrics(existing), "NEW_RUBRICS": format_rubrics(candidates)}
    try:
        value = ctx.call(tid, bindings, tag)
    except StructuredOutputFailed as exc:
        # unverified candidates could double-count evidence, so drop them all
        ctx.warn(f"{tag} failed; dropped all {len(candidates)} candidates: {exc.last_error}")
        return []
    flags: dict[str, bool] = {}
    for entry in value["results"]:
        flags.setdefault(entry["id"], entry[flag])
    kept = []
    for c in candidates:
        if c.id not in flags:
            ctx.warn(f"{tag}: no result for {c.id}; dropped")
        elif not flags[c.id]:
            kept.append(c)
    return kept


def filter_redundant_batch(
    ctx: JudgeContext, existing: Sequence[Criterion], candidates: Sequence[Criterion]
) -> list[Criterion]:
    return _filter_batch(
        ctx, existing, candidates, TemplateId.REDUNDANCY_FILTER, TAG_REDUNDANCY, "redundant"
    )


def filter_conflicting_batch(
    ctx: JudgeContext, existing: Sequence[Criterion], candidates: Sequence[Criterion]
) -> list[Criterion]:
    return _filter_batch(
        ctx, existing, candidates, TemplateId.CONFLICT_FILTER, TAG_CONFLICT, "conflicting"
    )


def refine(
    ctx: JudgeContext,
    instance: Instance,
    state: RefinementState,
    guidance: tuple[str, str],
    max_iterations: int = 2,
    *,
    depth_limit: int = 1,
    batching: str = "batched",
) -> tuple[RefinementState, CallCounter]:
    if max_iterations < 0:
        raise ValueError("max_iterations must be >= 0")
    counter = CallCounter()
    while state.iteration < max_iterations:
        tied = select_ties(state, depth_limit)
        if not tied:
            break
        state.iteration += 1
        tied_ids = {c.id for c in tied}
        state.attempted |= tied_ids
        others = [c for c in state.active_criteria if c.id not in tied_ids]

        counter.decomposition_calls += 1
        candidates = decompose_batch(
            ctx, instance, [(c, state.judgments[c.id]) for c in tied], others, state.next_sub_index
        )
        state.next_sub_index += len(candidates)
        nonredundant: list[Criterion] = []
        accepted: list[Criterion] = []
        if candidates:
            counter.redundancy_calls += 1
            nonredundant = filter_redundant_batch(ctx, others, candidates)
            if nonredundant:
                counter.conflict_calls += 1
                accepted = filter_conflicting_batch(ctx, others, nonredundant)
        counter.plain_loop_equivalent += plain_loop_call_count(
            len(tied), len(candidates), len(nonredundant)
        )

        if accepted:
            counter.rejudge_calls += 1 if batching == "batched" else len(accepted)
            batch = judge_criteria(
                ctx, instance, accepted, guidance, Order.FORWARD, batching=batching, tag=TAG_REJUDGE
            )
            state.judgments.update(batch.by_id())
            for c in accepted:
                state.all_criteria[c.id] = c
            active: list[Criterion] = []
            for c in state.active_criteria:
                children = [k for k in accepted if k.parent_id == c.id]
                if children:
                    state.retired_parents.add(c.id)
                    active.extend(children)
                else:
                    active.append(c)
            state.active_criteria = active

        state.rounds.append(
            {
                "iteration": state.iteration,
                "n_tie": len(tied),
                "n_sub": len(candidates),
                "n_nonred": len(nonredundant),
                "n_accepted": len(accepted),
            }
        )
    return state, counter
