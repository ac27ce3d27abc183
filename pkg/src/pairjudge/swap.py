"""Swap-consistency filtering and position-bias statistics.

Every active criterion is judged a second time with the two responses (and
their evidence) exchanged. A forward verdict survives only if it equals the
backward verdict mapped back into the forward frame.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .context import JudgeContext
from .core import (
    Criterion,
    CriterionJudgment,
    Instance,
    Order,
    PairJudgeError,
    Verdict,
    swap_verdict,
)
from .criteria import judge_criteria


class EmptyInput(PairJudgeError):
    pass


def consistency_keep(v_fwd: Verdict, v_bwd: Verdict) -> bool:
    """True when the forward verdict survives the order swap."""
    return v_fwd is swap_verdict(v_bwd)


@dataclass
class EvidenceSet:
    kept: list[tuple[Criterion, CriterionJudgment]] = field(default_factory=list)
    dropped: list[tuple[Criterion, Verdict, Verdict]] = field(default_factory=list)
    scf_applied: bool = True

    @classmethod
    def unfiltered(cls, pairs: Iterable[tuple[Criterion, CriterionJudgment]]) -> "EvidenceSet":
        """Forward evidence passed through as-is (filtering disabled or degraded)."""
        return cls(kept=list(pairs), dropped=[], scf_applied=False)

    @property
    def kept_verdicts(self) -> list[Verdict]:
        return [j.verdict for _, j in self.kept]

    def to_dict(self) -> dict:
        return {
            "scf_applied": self.scf_applied,
            "kept": [{"criterion": c.to_dict(), "judgment": j.to_dict()} for c, j in self.kept],
            "dropped": [
                {"criterion": c.to_dict(), "forward": f.value, "backward": b.value}
                for c, f, b in self.dropped
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvidenceSet":
        return cls(
            kept=[
                (Criterion.from_dict(e["criterion"]), CriterionJudgment.from_dict(e["judgment"]))
                for e in data["kept"]
            ],
            dropped=[
                (Criterion.from_dict(e["criterion"]), Verdict(e["forward"]), Verdict(e["backward"]))
                for e in data["dropped"]
            ],
            scf_applied=data["scf_applied"],
        )


def partition(
    forward: Sequence[tuple[Criterion, CriterionJudgment]],
    backward: dict[str, CriterionJudgment],
    unchecked: frozenset[str] = frozenset(),
) -> EvidenceSet:
    """Split forward evidence by the keep rule; ids in ``unchecked`` are kept as-is."""
    out = EvidenceSet()
    for c, fj in forward:
        if c.id in unchecked:
            out.kept.append((c, fj))
            continue
        bv = backward[c.id].verdict
        if consistency_keep(fj.verdict, bv):
            out.kept.append((c, fj))
        else:
            out.dropped.append((c, fj.verdict, bv))
    return out


def scf_filter(
    ctx: JudgeContext,
    instance: Instance,
    criteria_with_fwd: Sequence[tuple[Criterion, CriterionJudgment]],
    guidance: tuple[str, str],
    *,
    batching: str = "batched",
) -> tuple[EvidenceSet, list[CriterionJudgment]]:
    """Filter forward evidence by swap consistency.

    Returns the evidence set and the raw backward judgments (in the swapped
    frame). A failed backward call keeps all forward evidence and marks the
    set as unfiltered; criteria whose individual backward call failed are
    kept as well, since there is nothing to compare them against.
    """
    if not criteria_with_fwd:
        return EvidenceSet(scf_applied=True), []
    criteria = [c for c, _ in criteria_with_fwd]
    batch = judge_criteria(ctx, instance, criteria, guidance, Order.BACKWARD, batching=batching)
    if batch.failed:
        ctx.warn(f"{instance.id}: backward judging failed; swap filtering skipped")
        return EvidenceSet.unfiltered(criteria_with_fwd), list(batch.judgments)
    return partition(criteria_with_fwd, batch.by_id(), batch.failed_ids), list(batch.judgments)


# ---------------------------------------------------------------------------
# bias statistics


class BiasLevel(str, enum.Enum):
    CRITERION = "criterion"
    SAMPLE = "sample"


class BiasStage(str, enum.Enum):
    PRE_SCF = "pre_scf"
    POST_SCF = "post_scf"


_BUCKETS = ("A", "B", "Tie")


@dataclass(frozen=True)
class BiasReport:
    level: BiasLevel
    stage: BiasStage | None
    counts: dict[str, int]
    insufficient: int = 0

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def percentages(self) -> dict[str, float]:
        n = self.total
        return {k: 100.0 * self.counts[k] / n if n else 0.0 for k in _BUCKETS}

    @property
    def skew_pp(self) -> float:
        p = self.percentages
        return p["A"] - p["B"]

    @property
    def ab_ratio(self) -> float | None:
        b = self.counts["B"]
        return self.counts["A"] / b if b else None

    def to_dict(self) -> dict:
        return {
            "level": self.level.value,
            "stage": self.stage.value if self.stage else None,
            "counts": dict(self.counts),
            "insufficient": self.insufficient,
            "percentages": {k: round(v, 2) for k, v in self.percentages.items()},
            "skew_pp": round(self.skew_pp, 2),
            "ab_ratio": None if self.ab_ratio is None else round(self.ab_ratio, 4),
        }


def _bucket(v: Verdict) -> str | None:
    if v is Verdict.A:
        return "A"
    if v is Verdict.B:
        return "B"
    if v is Verdict.TIE:
        return "Tie"
    return None


def sample_majority(verdicts: Iterable[Verdict]) -> str:
    """Which side wins more criteria; equal A and B counts give Tie."""
    vs = list(verdicts)
    a = sum(v is Verdict.A for v in vs)
    b = sum(v is Verdict.B for v in vs)
    return "A" if a > b else "B" if b > a else "Tie"


def bias_from_verdicts(
    groups: Sequence[Sequence[Verdict]],
    level: BiasLevel = BiasLevel.CRITERION,
    stage: BiasStage | None = None,
) -> BiasReport:
    """Bias report over per-instance verdict lists."""
    if not groups or not any(groups):
        raise EmptyInput("no verdicts to summarize")
    counts = dict.fromkeys(_BUCKETS, 0)
    insufficient = 0
    if level is BiasLevel.CRITERION:
        for vs in groups:
            for v in vs:
                k = _bucket(v)
                if k is None:
                    insufficient += 1
                else:
                    counts[k] += 1
    else:
        for vs in groups:
            counts[sample_majority(vs)] += 1
    return BiasReport(level, stage, counts, insufficient)


def bias_from_percentages(pct_a: float, pct_b: float, pct_tie: float, scale: int = 1000) -> BiasReport:
    """Report for a distribution given as percentages (counts scaled to ``scale`` per 100%)."""
    counts = {k: round(p * scale / 100) for k, p in zip(_BUCKETS, (pct_a, pct_b, pct_tie))}
    return BiasReport(BiasLevel.CRITERION, None, counts)


def bias_stats(results: Sequence, level: BiasLevel, stage: BiasStage) -> BiasReport:
    """Bias report over pipeline results.

    Pre-filter uses every forward verdict of the active criteria; post-filter
    uses only kept verdicts. Results without criterion evidence are skipped.
    """
    groups = []
    for r in results:
        ev = getattr(r, "evidence", None)
        if ev is None:
            continue
        if stage is BiasStage.PRE_SCF:
            groups.append([j.verdict for _, j in ev.kept] + [f for _, f, _ in ev.dropped])
        else:
            groups.append(ev.kept_verdicts)
    return bias_from_verdicts(groups, level, stage)


@dataclass(frozen=True)
class PoolShrink:
    """Size of the criterion pool before and after filtering.

    ``dropped`` counts criteria. ``disagreeing_judgments`` counts both
    directions' entries of every dropped criterion, a second convention for
    the same removals.
    """

    n_pre: int
    n_post: int
    samples: int
    samples_with_drop: int

    @property
    def dropped(self) -> int:
        return self.n_pre - self.n_post

    @property
    def disagreeing_judgments(self) -> int:
        return 2 * self.dropped

    @property
    def pct_samples_with_drop(self) -> float:
        return 100.0 * self.samples_with_drop / self.samples if self.samples else 0.0

    def to_dict(self) -> dict:
        return {
            "n_pre": self.n_pre,
            "n_post": self.n_post,
            "dropped_criteria": self.dropped,
            "disagreeing_judgments": self.disagreeing_judgments,
            "samples": self.samples,
            "samples_with_drop": self.samples_with_drop,
            "pct_samples_with_drop": round(self.pct_samples_with_drop, 2),
        }


def pool_shrink(evidence_sets: Iterable[EvidenceSet]) -> PoolShrink:
    n_pre = n_post = samples = with_drop = 0
    for ev in evidence_sets:
        samples += 1
        n_post += len(ev.kept)
        n_pre += len(ev.kept) + len(ev.dropped)
        with_drop += bool(ev.dropped)
    return PoolShrink(n_pre, n_post, samples, with_drop)
