"""Domain types and the label/verdict algebra shared by every stage."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping


class PairJudgeError(Exception):
    """Base class for all errors raised by this package."""


class UnknownVoteToken(PairJudgeError):
    pass


class InvalidInstance(PairJudgeError):
    pass


class PreferenceLabel(str, enum.Enum):
    A = "A"
    B = "B"
    TIE = "Tie"

    @classmethod
    def parse(cls, value: str) -> "PreferenceLabel":
        """Accept the final-judge form ("Tie") and the lower-case stage form ("tie")."""
        token = value.strip()
        if token.lower() == "tie":
            return cls.TIE
        if token.upper() in ("A", "B"):
            return cls(token.upper())
        raise ValueError(f"not a preference label: {value!r}")

    @property
    def stage_form(self) -> str:
        return "tie" if self is PreferenceLabel.TIE else self.value


class Verdict(str, enum.Enum):
    A = "A"
    B = "B"
    TIE = "tie"
    INSUFFICIENT = "insufficient_evidence"

    @classmethod
    def parse(cls, value: str) -> "Verdict":
        token = value.strip()
        low = token.lower()
        if low == "tie":
            return cls.TIE
        if low in ("insufficient_evidence", "insufficient"):
            return cls.INSUFFICIENT
        if token.upper() in ("A", "B"):
            return cls(token.upper())
        raise ValueError(f"not a verdict: {value!r}")


class Confidence(str, enum.Enum):
    HIGH = "high"
    MEDIUM = "medium"
    LOW = "low"


class Aspect(str, enum.Enum):
    CORRECTNESS = "correctness"
    EFFICIENCY = "efficiency"
    EXPLAINABILITY = "explainability"
    MAINTAINABILITY = "maintainability"
    UI_UX_DESIGN = "ui_ux_design"
    OTHERS = "OTHERS"


# The five aspects humans vote on; OTHERS is judge-side only.
HUMAN_ASPECTS: tuple[Aspect, ...] = (
    Aspect.CORRECTNESS,
    Aspect.EFFICIENCY,
    Aspect.EXPLAINABILITY,
    Aspect.MAINTAINABILITY,
    Aspect.UI_UX_DESIGN,
)


class TaskCategory(str, enum.Enum):
    WEB_DEVELOPMENT = "web_development"
    GAME_DEVELOPMENT = "game_development"
    CREATIVE_CODING = "creative_coding"
    DIAGRAM_CREATION = "diagram_creation"
    SCIENTIFIC_COMPUTING = "scientific_computing"
    PROBLEM_SOLVING = "problem_solving"

    @classmethod
    def parse(cls, value: str) -> "TaskCategory":
        """Accept snake_case keys as well as display names like "Web Development"."""
        key = value.strip().lower().replace("-", "_").replace(" ", "_")
        return cls(key)


class EvidenceBasis(str, enum.Enum):
    INSTRUCTION = "instruction"
    CODE = "code"
    EXECUTION_OUTPUT = "execution_output"
    SCREENSHOT = "screenshot"


EVIDENCE_TOKENS = frozenset(e.value for e in EvidenceBasis)


class Origin(str, enum.Enum):
    GENERATED = "generated"
    REFINED = "refined"


class Order(str, enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass(frozen=True)
class EvidenceBundle:
    exec_output_a: str | None = None
    exec_output_b: str | None = None
    screenshot_refs_a: tuple[str, ...] = ()
    screenshot_refs_b: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "exec_output_a": self.exec_output_a,
            "exec_output_b": self.exec_output_b,
            "screenshots_a": list(self.screenshot_refs_a),
            "screenshots_b": list(self.screenshot_refs_b),
        }

    @classmethod
    def from_dict(cls, data: Mapping | None) -> "EvidenceBundle":
        data = data or {}
        return cls(
            exec_output_a=data.get("exec_output_a"),
            exec_output_b=data.get("exec_output_b"),
            screenshot_refs_a=tuple(data.get("screenshots_a") or ()),
            screenshot_refs_b=tuple(data.get("screenshots_b") or ()),
        )


@dataclass(frozen=True)
class Instance:
    id: str
    instruction: str
    response_a: str
    response_b: str
    category: TaskCategory
    evidence: EvidenceBundle = field(default_factory=EvidenceBundle)
    human_overall: PreferenceLabel | None = None
    human_aspect_votes: Mapping[Aspect, PreferenceLabel | None] = field(
        default_factory=lambda: MappingProxyType({})
    )

    def __post_init__(self) -> None:
        for name in ("id", "instruction", "response_a", "response_b"):
            if not getattr(self, name):
                raise InvalidInstance(f"instance field {name!r} must be non-empty")
        if not isinstance(self.human_aspect_votes, MappingProxyType):
            object.__setattr__(
                self, "human_aspect_votes", MappingProxyType(dict(self.human_aspect_votes))
            )

    def swapped(self) -> "Instance":
        """The same comparison with A and B exchanged (labels mapped accordingly)."""
        return replace(
            self,
            response_a=self.response_b,
            response_b=self.response_a,
            evidence=swap_evidence(self.evidence),
            human_overall=swap_label(self.human_overall) if self.human_overall else None,
            human_aspect_votes={
                k: swap_label(v) if v else None for k, v in self.human_aspect_votes.items()
            },
        )


@dataclass(frozen=True)
class Criterion:
    id: str
    statement: str
    rationale: str
    evidence_basis: tuple[EvidenceBasis, ...]
    origin: Origin = Origin.GENERATED
    parent_id: str | None = None

    def __post_init__(self) -> None:
        if not self.statement.strip():
            raise ValueError(f"criterion {self.id} has an empty statement")
        if not self.evidence_basis:
            raise ValueError(f"criterion {self.id} has an empty evidence_basis")
        if (self.parent_id is not None) != (self.origin is Origin.REFINED):
            raise ValueError(f"criterion {self.id}: parent_id is set iff origin is refined")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "criterion": self.statement,
            "rationale": self.rationale,
            "evidence_basis": [e.value for e in self.evidence_basis],
            "origin": self.origin.value,
            "parent_id": self.parent_id,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Criterion":
        return cls(
            id=data["id"],
            statement=data["criterion"],
            rationale=data.get("rationale", ""),
            evidence_basis=tuple(EvidenceBasis(e) for e in data["evidence_basis"]),
            origin=Origin(data.get("origin", "generated")),
            parent_id=data.get("parent_id"),
        )


@dataclass(frozen=True)
class CriterionJudgment:
    criterion_id: str
    verdict: Verdict
    confidence: Confidence
    rationale: str
    evidence_used: tuple[EvidenceBasis, ...]
    mapped_aspect: Aspect
    order: Order = Order.FORWARD

    def to_dict(self) -> dict:
        return {
            "criterion_id": self.criterion_id,
            "judgment": self.verdict.value,
            "confidence": self.confidence.value,
            "rationale": self.rationale,
            "evidence_basis": [e.value for e in self.evidence_used],
            "mapped_aspect": self.mapped_aspect.value,
            "order": self.order.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CriterionJudgment":
        return cls(
            criterion_id=data["criterion_id"],
            verdict=Verdict(data["judgment"]),
            confidence=Confidence(data["confidence"]),
            rationale=data.get("rationale", ""),
            evidence_used=tuple(EvidenceBasis(e) for e in data.get("evidence_basis", ())),
            mapped_aspect=Aspect(data["mapped_aspect"]),
            order=Order(data.get("order", "forward")),
        )


DEFAULT_VOTE_MAP: Mapping[str, PreferenceLabel] = MappingProxyType(
    {
        "model_a": PreferenceLabel.A,
        "model_b": PreferenceLabel.B,
        "tie": PreferenceLabel.TIE,
        "tie (bothbad)": PreferenceLabel.TIE,
        "A": PreferenceLabel.A,
        "B": PreferenceLabel.B,
        "Tie": PreferenceLabel.TIE,
    }
)


def map_raw_label(
    raw_vote: str, table: Mapping[str, PreferenceLabel] = DEFAULT_VOTE_MAP
) -> PreferenceLabel:
    """Map a dataset vote token to A/B/Tie; both-bad style tokens collapse to Tie."""
    try:
        return table[raw_vote]
    except KeyError:
        raise UnknownVoteToken(f"unknown vote token {raw_vote!r}") from None


_SWAP = {Verdict.A: Verdict.B, Verdict.B: Verdict.A}


def swap_verdict(v: Verdict) -> Verdict:
    return _SWAP.get(v, v)


def swap_label(label: PreferenceLabel) -> PreferenceLabel:
    if label is PreferenceLabel.A:
        return PreferenceLabel.B
    if label is PreferenceLabel.B:
        return PreferenceLabel.A
    return label


def swap_evidence(e: EvidenceBundle) -> EvidenceBundle:
    return EvidenceBundle(
        exec_output_a=e.exec_output_b,
        exec_output_b=e.exec_output_a,
        screenshot_refs_a=e.screenshot_refs_b,
        screenshot_refs_b=e.screenshot_refs_a,
    )


def verdict_to_label(v: Verdict) -> PreferenceLabel | None:
    """A/B/Tie verdicts as preference labels; insufficient evidence has no label."""
    if v is Verdict.A:
        return PreferenceLabel.A
    if v is Verdict.B:
        return PreferenceLabel.B
    if v is Verdict.TIE:
        return PreferenceLabel.TIE
    return None


class Stage(str, enum.Enum):
    """Pipeline stages that receive guidance text."""

    GENERATION = "generation"
    CRITERION_JUDGING = "criterion_judging"
    FINAL_JUDGING = "final_judging"
