"""Offline guidance synthesis from training-split disagreement records.

The flow is: run a monolithic judge on each training pair, reconstruct a
plausible rationale for the human vote, package both into a record, fit the
records into a context budget, and ask a synthesizer for global and
per-category guidance. The result is a frozen artifact with provenance.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Collection, Mapping, Sequence

from .context import JudgeContext
from .core import (
    HUMAN_ASPECTS,
    Aspect,
    Instance,
    PairJudgeError,
    PreferenceLabel,
    Stage,
    TaskCategory,
)
from .gateway import StructuredOutputFailed, validate
from .prompts import TemplateId, guidance_bindings, pair_bindings
from .schemas import CATEGORY_KEYS

logger = logging.getLogger(__name__)

TAG_MONOLITHIC = "monolithic_judge"
TAG_HUMAN_RATIONALE = "human_rationale"
TAG_SYNTHESIS = "guidance_synthesis"

JUDGE_FAILED = "judge failed"
REASONING_WORDS = (100, 180)

REFERENCE_GUIDANCE_PATH = Path(__file__).resolve().parent / "data" / "reference_guidance.json"

_STAGE_FIELDS = {
    Stage.GENERATION: "criterion_generation_guidance",
    Stage.CRITERION_JUDGING: "criterion_judging_guidance",
    Stage.FINAL_JUDGING: "final_judging_guidance",
}


class MissingHumanLabel(PairJudgeError):
    pass


class BudgetTooSmall(PairJudgeError):
    pass


class LeakageError(PairJudgeError):
    """A record outside the training split was offered to synthesis."""


class SynthesisFailed(PairJudgeError):
    pass


class ArtifactHashMismatch(PairJudgeError):
    pass


def _canonical(value) -> str:
    return json.dumps(value, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# artifact


@dataclass(frozen=True)
class CategoryBlock:
    key_divergence_patterns: tuple[str, ...]
    stage_guidance: Mapping[Stage, str]

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_guidance", MappingProxyType(dict(self.stage_guidance)))

    def to_dict(self) -> dict:
        out: dict = {"key_divergence_patterns": list(self.key_divergence_patterns)}
        for stage, key in _STAGE_FIELDS.items():
            out[key] = self.stage_guidance[stage]
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "CategoryBlock":
        return cls(
            tuple(data["key_divergence_patterns"]),
            {stage: data[key] for stage, key in _STAGE_FIELDS.items()},
        )


@dataclass(frozen=True)
class Provenance:
    synthesizer: str
    train_split_hash: str
    created_at: str
    record_count: int
    record_ids: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "synthesizer": self.synthesizer,
            "train_split_hash": self.train_split_hash,
            "created_at": self.created_at,
            "record_count": self.record_count,
            "record_ids": list(self.record_ids),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Provenance":
        return cls(
            data["synthesizer"],
            data["train_split_hash"],
            data["created_at"],
            data["record_count"],
            tuple(data.get("record_ids", ())),
        )


@dataclass(frozen=True)
class GuidanceArtifact:
    """Global plus per-category guidance; immutable once built."""

    key_divergence_patterns: tuple[str, ...]
    stage_guidance: Mapping[Stage, str]
    category_blocks: Mapping[TaskCategory, CategoryBlock]
    provenance: Provenance | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_guidance", MappingProxyType(dict(self.stage_guidance)))
        object.__setattr__(self, "category_blocks", MappingProxyType(dict(self.category_blocks)))
        missing = [c.value for c in TaskCategory if c not in self.category_blocks]
        if missing:
            raise ValueError(f"guidance artifact lacks category blocks: {missing}")

    def stage_text(self, stage: Stage) -> str:
        return self.stage_guidance[stage]

    def category_stage_text(self, category: TaskCategory, stage: Stage) -> str:
        return self.category_blocks[category].stage_guidance[stage]

    def content_dict(self) -> dict:
        """The guidance itself, in the synthesizer's output layout."""
        out: dict = {"key_divergence_patterns": list(self.key_divergence_patterns)}
        for stage, key in _STAGE_FIELDS.items():
            out[key] = self.stage_guidance[stage]
        out["category_specific_guidance"] = {
            c: self.category_blocks[TaskCategory(c)].to_dict() for c in CATEGORY_KEYS
        }
        return out

    @property
    def content_hash(self) -> str:
        return _sha256(_canonical(self.content_dict()))

    def to_dict(self) -> dict:
        out = self.content_dict()
        if self.provenance is not None:
            out["provenance"] = {**self.provenance.to_dict(), "content_hash": self.content_hash}
        return out

    @classmethod
    def from_dict(cls, data: Mapping, *, verify: bool = True) -> "GuidanceArtifact":
        content = {k: v for k, v in data.items() if k != "provenance"}
        validate(content, "guidance_synthesis")
        artifact = cls(
            tuple(content["key_divergence_patterns"]),
            {stage: content[key] for stage, key in _STAGE_FIELDS.items()},
            {
                TaskCategory(k): CategoryBlock.from_dict(v)
                for k, v in content["category_specific_guidance"].items()
                if k in CATEGORY_KEYS
            },
            Provenance.from_dict(data["provenance"]) if "provenance" in data else None,
        )
        recorded = data.get("provenance", {}).get("content_hash")
        if verify and recorded is not None and recorded != artifact.content_hash:
            raise ArtifactHashMismatch(
                f"content hash {artifact.content_hash[:12]} != recorded {recorded[:12]}"
            )
        return artifact

    def save(self, path: str | Path) -> Path:
        """Write the artifact and a sidecar ``<name>.manifest.json`` holding its hash."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"
        path.write_text(text, encoding="utf-8")
        sidecar = manifest_path(path)
        sidecar.write_text(
            json.dumps({"content_hash": self.content_hash, "file_sha256": _sha256(text)}, indent=2)
            + "\n",
            encoding="utf-8",
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "GuidanceArtifact":
        path = Path(path)
        artifact = cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        sidecar = manifest_path(path)
        if sidecar.exists():
            expected = json.loads(sidecar.read_text(encoding="utf-8"))["content_hash"]
            if expected != artifact.content_hash:
                raise ArtifactHashMismatch(
                    f"{path}: content hash {artifact.content_hash[:12]} != manifest {expected[:12]}"
                )
        return artifact


def manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


def reference_artifact() -> GuidanceArtifact:
    """The bundled example guidance, useful as a fixture and for dry runs."""
    return GuidanceArtifact.from_dict(json.loads(REFERENCE_GUIDANCE_PATH.read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class HumanRationale:
    reasoning: str
    key_factors: tuple[str, ...] = ()
    primary_aspect: str = ""
    aspect_analysis: Mapping[str, Mapping] = field(default_factory=lambda: MappingProxyType({}))
    decisive_aspects: tuple[str, ...] = ()
    flagged: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "aspect_analysis",
            MappingProxyType({k: dict(v) for k, v in self.aspect_analysis.items()}),
        )

    def to_dict(self) -> dict:
        return {
            "reasoning": self.reasoning,
            "key_factors": list(self.key_factors),
            "primary_aspect": self.primary_aspect,
            "aspect_analysis": {k: dict(v) for k, v in self.aspect_analysis.items()},
            "decisive_aspects": list(self.decisive_aspects),
            "flagged": self.flagged,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "HumanRationale":
        return cls(
            data["reasoning"],
            tuple(data.get("key_factors", ())),
            data.get("primary_aspect", ""),
            data.get("aspect_analysis", {}),
            tuple(data.get("decisive_aspects", ())),
            data.get("flagged", False),
        )

    @classmethod
    def stub(cls) -> "HumanRationale":
        return cls(reasoning="", flagged=True)


@dataclass(frozen=True)
class GuidanceRecord:
    instance_ref: str
    category: TaskCategory
    instruction: str
    response_a: str
    response_b: str
    mono_prediction: PreferenceLabel
    mono_rationale: str
    human_label: PreferenceLabel
    aspect_votes: Mapping[Aspect, PreferenceLabel | None]
    human_rationale: HumanRationale

    def __post_init__(self) -> None:
        object.__setattr__(self, "aspect_votes", MappingProxyType(dict(self.aspect_votes)))

    @property
    def agrees(self) -> bool:
        return self.mono_prediction is self.human_label

    def to_dict(self) -> dict:
        return {
            "instance_ref": self.instance_ref,
            "category": self.category.value,
            "instruction": self.instruction,
            "response_a": self.response_a,
            "response_b": self.response_b,
            "mono_prediction": self.mono_prediction.value,
            "mono_rationale": self.mono_rationale,
            "human_label": self.human_label.value,
            "aspect_votes": {
                a.value: (v.value if v else None) for a, v in self.aspect_votes.items()
            },
            "human_rationale": self.human_rationale.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: Mapping) -> "GuidanceRecord":
        return cls(
            data["instance_ref"],
            TaskCategory(data["category"]),
            data["instruction"],
            data["response_a"],
            data["response_b"],
            PreferenceLabel(data["mono_prediction"]),
            data["mono_rationale"],
            PreferenceLabel(data["human_label"]),
            {
                Aspect(k): (PreferenceLabel(v) if v else None)
                for k, v in data.get("aspect_votes", {}).items()
            },
            HumanRationale.from_dict(data["human_rationale"]),
        )


def run_monolithic(
    ctx: JudgeContext, instance: Instance, guidance: tuple[str, str]
) -> tuple[PreferenceLabel, str]:
    """Single-call preference with rationale; failures degrade to (Tie, "judge failed")."""
    bindings = {
        **pair_bindings(instance, attach_screenshots=ctx.attach_screenshots),
        **guidance_bindings(guidance),
    }
    try:
        value = ctx.call(TemplateId.MONOLITHIC_JUDGE, bindings, TAG_MONOLITHIC)
    except StructuredOutputFailed as exc:
        ctx.warn(f"{instance.id}: monolithic judge failed: {exc.last_error}")
        return PreferenceLabel.TIE, JUDGE_FAILED
    overall = value["Overall"]
    return PreferenceLabel(overall["winner"]), overall["reasoning"]


def format_aspect_votes(votes: Mapping[Aspect, PreferenceLabel | None]) -> str:
    return json.dumps(
        {a.value: (votes[a].value if votes.get(a) else None) for a in HUMAN_ASPECTS}, indent=2
    )


def reconstruct_human_rationale(ctx: JudgeContext, instance: Instance) -> HumanRationale:
    if instance.human_overall is None:
        raise MissingHumanLabel(f"{instance.id}: no human vote")
    bindings = {
        **pair_bindings(instance, attach_screenshots=ctx.attach_screenshots),
        "HUMAN_ASPECT_VOTES": format_aspect_votes(instance.human_aspect_votes),
        "HUMAN_VOTE_LABEL": instance.human_overall.value,
    }
    try:
        value = ctx.call(TemplateId.HUMAN_RATIONALE, bindings, TAG_HUMAN_RATIONALE)
    except StructuredOutputFailed as exc:
        ctx.warn(f"{instance.id}: human rationale failed, using a flagged stub: {exc.last_error}")
        return HumanRationale.stub()
    words = len(value["reasoning"].split())
    lo, hi = REASONING_WORDS
    if not lo <= words <= hi:
        ctx.warn(f"{instance.id}: human rationale has {words} words, outside {lo}-{hi}")
    return HumanRationale(
        value["reasoning"],
        tuple(value["key_factors"]),
        value["primary_aspect"],
        value["aspect_analysis"],
        tuple(value["decisive_aspects"]),
    )


def assemble_record(
    instance: Instance, mono: tuple[PreferenceLabel, str], human_rationale: HumanRationale
) -> GuidanceRecord:
    if instance.human_overall is None:
        raise MissingHumanLabel(f"{instance.id}: no human vote")
    return GuidanceRecord(
        instance_ref=instance.id,
        category=instance.category,
        instruction=instance.instruction,
        response_a=instance.response_a,
        response_b=instance.response_b,
        mono_prediction=mono[0],
        mono_rationale=mono[1],
        human_label=instance.human_overall,
        aspect_votes=instance.human_aspect_votes,
        human_rationale=human_rationale,
    )


def prepare_record(ctx: JudgeContext, instance: Instance, guidance: tuple[str, str]) -> GuidanceRecord:
    mono = run_monolithic(ctx, instance, guidance)
    return assemble_record(instance, mono, reconstruct_human_rationale(ctx, instance))


def estimate_tokens(record: GuidanceRecord) -> int:
    return math.ceil(len(record.to_json()) / 4)


def downsample(
    records: Sequence[GuidanceRecord], token_budget: int, seed: int
) -> list[GuidanceRecord]:
    """Seeded subset of ``records`` that fits ``token_budget``.

    One record per category is placed first (when it fits), then the rest
    are added in seeded random order, skipping any that would overflow.
    The result keeps input order.
    """
    if token_budget <= 0:
        raise ValueError("token_budget must be positive")
    if not records:
        return []
    sizes = [estimate_tokens(r) for r in records]
    if min(sizes) > token_budget:
        raise BudgetTooSmall(f"smallest record needs {min(sizes)} tokens > budget {token_budget}")
    order = list(range(len(records)))
    random.Random(seed).shuffle(order)

    chosen: set[int] = set()
    used = 0
    seen_categories: set[TaskCategory] = set()
    for i in order:
        cat = records[i].category
        if cat in seen_categories:
            continue
        seen_categories.add(cat)
        if used + sizes[i] <= token_budget:
            chosen.add(i)
            used += sizes[i]
    for i in order:
        if i not in chosen and used + sizes[i] <= token_budget:
            chosen.add(i)
            used += sizes[i]
    return [records[i] for i in sorted(chosen)]


def _pct(num: int, den: int) -> float:
    return round(100.0 * num / den, 1) if den else 0.0


def aggregate_stats(records: Sequence[GuidanceRecord]) -> dict:
    by_cat: dict[str, list[GuidanceRecord]] = {}
    for r in records:
        by_cat.setdefault(r.category.value, []).append(r)
    aspect_dist = {}
    for a in HUMAN_ASPECTS:
        c = Counter(
            (r.aspect_votes.get(a).value if r.aspect_votes.get(a) else "missing") for r in records
        )
        aspect_dist[a.value] = {k: c.get(k, 0) for k in ("A", "B", "Tie", "missing")}
    return {
        "total_records": len(records),
        "records_per_category": {k: len(v) for k, v in sorted(by_cat.items())},
        "judge_human_agreement_pct": _pct(sum(r.agrees for r in records), len(records)),
        "agreement_pct_per_category": {
            k: _pct(sum(r.agrees for r in v), len(v)) for k, v in sorted(by_cat.items())
        },
        "human_overall_distribution": dict(
            sorted(Counter(r.human_label.value for r in records).items())
        ),
        "human_aspect_vote_distribution": aspect_dist,
    }


def _cap(text: str, limit: int) -> str:
    return text if len(text) <= limit else text[:limit] + f"... [truncated {len(text) - limit} chars]"


def format_sample_cases(records: Sequence[GuidanceRecord], char_cap: int = 1500) -> str:
    """Disagreements first, then agreements; long fields are truncated to ``char_cap``."""
    ordered = [r for r in records if not r.agrees] + [r for r in records if r.agrees]
    blocks = []
    for n, r in enumerate(ordered, 1):
        status = "AGREE" if r.agrees else "DISAGREE"
        hr = r.human_rationale
        blocks.append(
            "\n".join(
                [
                    f"### Case {n} [{status}] ({r.category.value}, id={r.instance_ref})",
                    f"Instruction: {_cap(r.instruction, char_cap)}",
                    f"Response A: {_cap(r.response_a, char_cap)}",
                    f"Response B: {_cap(r.response_b, char_cap)}",
                    f"Human vote: {r.human_label.value}; judge prediction: {r.mono_prediction.value}",
                    "Human aspect votes: "
                    + ", ".join(
                        f"{a.value}={r.aspect_votes[a].value if r.aspect_votes.get(a) else 'n/a'}"
                        for a in HUMAN_ASPECTS
                    ),
                    f"Human rationale: {_cap(hr.reasoning, char_cap) or '(unavailable)'}",
                    f"Decisive aspects: {', '.join(hr.decisive_aspects) or 'n/a'}",
                    f"Judge rationale: {_cap(r.mono_rationale, char_cap)}",
                ]
            )
        )
    return "\n\n".join(blocks)


def split_hash(train_ids: Collection[str]) -> str:
    return _sha256("\n".join(sorted(train_ids)))


def synthesize_guidance(
    ctx: JudgeContext,
    records: Sequence[GuidanceRecord],
    train_ids: Collection[str],
    *,
    synthesizer: str | None = None,
    token_budget: int = 100_000,
    seed: int = 0,
    char_cap: int = 1500,
    created_at: str | None = None,
) -> GuidanceArtifact:
    """One synthesis call over (a budgeted subset of) training records.

    Every record must come from ``train_ids``; this is checked before any
    model call. Raises SynthesisFailed when no valid output can be obtained.
    """
    train = set(train_ids)
    leaked = sorted(r.instance_ref for r in records if r.instance_ref not in train)
    if leaked:
        raise LeakageError(f"{len(leaked)} record(s) not in the training split: {leaked[:5]}")
    if not records:
        raise SynthesisFailed("no records to synthesize from")

    used = downsample(records, token_budget, seed)
    if len(used) < len(records):
        logger.info("downsampled %d -> %d records for budget %d", len(records), len(used), token_budget)
    if synthesizer is not None:
        ctx = replace(ctx, stage_models={**ctx.stage_models, TAG_SYNTHESIS: synthesizer})
    bindings = {
        "AGGREGATE_STATS": json.dumps(aggregate_stats(used), indent=2),
        "SAMPLE_CASES": format_sample_cases(used, char_cap),
    }
    try:
        value = ctx.call(TemplateId.GUIDANCE_SYNTHESIS, bindings, TAG_SYNTHESIS)
    except StructuredOutputFailed as exc:
        raise SynthesisFailed(f"guidance synthesis failed: {exc}") from exc

    stamp = created_at or _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()
    provenance = Provenance(
        synthesizer=ctx.model_for(TAG_SYNTHESIS),
        train_split_hash=split_hash(train),
        created_at=stamp,
        record_count=len(used),
        record_ids=tuple(sorted(r.instance_ref for r in used)),
    )
    return replace(GuidanceArtifact.from_dict(value), provenance=provenance)
