"""Pairwise code-preference judging with criterion evidence.

Criteria are generated per comparison, judged pairwise, refined where they
tie, filtered for order consistency, and summarized by a final judge.
"""

from .core import (
    Aspect,
    Criterion,
    CriterionJudgment,
    EvidenceBundle,
    Instance,
    PairJudgeError,
    PreferenceLabel,
    Stage,
    TaskCategory,
    Verdict,
    swap_verdict,
)

__version__ = "0.1.0"

__all__ = [
    "Aspect",
    "Criterion",
    "CriterionJudgment",
    "EvidenceBundle",
    "Instance",
    "PairJudgeError",
    "PreferenceLabel",
    "Stage",
    "TaskCategory",
    "Verdict",
    "swap_verdict",
]
