"""Prompt templates, placeholder rendering, guidance composition and evidence sections."""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

from ..core import (
    Criterion,
    CriterionJudgment,
    Instance,
    PairJudgeError,
    Stage,
    TaskCategory,
    swap_evidence,
)
from ..gateway import image_marker

if TYPE_CHECKING:
    from ..guidance import GuidanceArtifact

TEMPLATE_DIR = Path(__file__).resolve().parent / "templates"
MANIFEST_PATH = Path(__file__).resolve().parent / "manifest.json"

PLACEHOLDER_RE = re.compile(r"\{([A-Z][A-Z0-9_]*)\}")

GLOBAL_GUIDANCE_SENTINEL = "No additional guidance."
CATEGORY_GUIDANCE_SENTINEL = "No category-specific guidance."
NO_EVIDENCE_TEXT = "No criterion-level evidence available."


class PromptError(PairJudgeError):
    pass


class MissingPlaceholder(PromptError):
    pass


class UnknownPlaceholder(PromptError):
    pass


class TemplateManifestMismatch(PromptError):
    pass


class UnresolvableAttachment(PromptError):
    pass


class TemplateId(str, enum.Enum):
    HUMAN_RATIONALE = "human_rationale"
    GUIDANCE_SYNTHESIS = "guidance_synthesis"
    CRITERION_GENERATION = "criterion_generation"
    PAIRWISE_CRITERION_JUDGING = "pairwise_criterion_judging"
    TIE_DECOMPOSITION = "tie_decomposition"
    REDUNDANCY_FILTER = "redundancy_filter"
    CONFLICT_FILTER = "conflict_filter"
    FINAL_JUDGE = "final_judge"
    MONOLITHIC_JUDGE = "monolithic_judge"
    POINTWISE_CRITERION_JUDGING = "pointwise_criterion_judging"
    WEIGHT_ASSIGNMENT = "weight_assignment"


OUTPUT_SCHEMAS: dict[TemplateId, str] = {
    TemplateId.HUMAN_RATIONALE: "human_rationale",
    TemplateId.GUIDANCE_SYNTHESIS: "guidance_synthesis",
    TemplateId.CRITERION_GENERATION: "criteria",
    TemplateId.PAIRWISE_CRITERION_JUDGING: "criterion_judging",
    TemplateId.TIE_DECOMPOSITION: "tie_decomposition",
    TemplateId.REDUNDANCY_FILTER: "redundancy_filter",
    TemplateId.CONFLICT_FILTER: "conflict_filter",
    TemplateId.FINAL_JUDGE: "final_judge",
    TemplateId.MONOLITHIC_JUDGE: "monolithic_judge",
    TemplateId.POINTWISE_CRITERION_JUDGING: "pointwise_judging",
    TemplateId.WEIGHT_ASSIGNMENT: "weight_assignment",
}


class HpagMode(str, enum.Enum):
    """How much synthesized guidance is injected into a stage prompt."""

    NONE = "none"
    GLOBAL = "global"
    FULL = "global+category"
    EMPTY_CATEGORY = "global+empty_category"


@dataclass(frozen=True)
class PromptTemplate:
    template_id: TemplateId
    body: str
    required_placeholders: frozenset[str]
    output_schema_id: str

    def __post_init__(self) -> None:
        found = frozenset(PLACEHOLDER_RE.findall(self.body))
        if found != self.required_placeholders:
            raise PromptError(
                f"{self.template_id.value}: placeholders in body {sorted(found)} "
                f"!= declared {sorted(self.required_placeholders)}"
            )

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.body.encode("utf-8")).hexdigest()

    def render(self, bindings: Mapping[str, str]) -> str:
        missing = self.required_placeholders - bindings.keys()
        if missing:
            raise MissingPlaceholder(", ".join(sorted(missing)))
        extra = bindings.keys() - self.required_placeholders
        if extra:
            raise UnknownPlaceholder(", ".join(sorted(extra)))
        # single pass: braces inside bound values are never re-expanded
        return PLACEHOLDER_RE.sub(lambda m: bindings[m.group(1)], self.body)


def build_manifest(template_dir: Path = TEMPLATE_DIR) -> dict:
    entries = {}
    for tid in TemplateId:
        filename = f"{tid.value}.txt"
        body = (template_dir / filename).read_text(encoding="utf-8")
        entries[tid.value] = {
            "filename": filename,
            "sha256": hashlib.sha256(body.encode("utf-8")).hexdigest(),
            "placeholders": sorted(set(PLACEHOLDER_RE.findall(body))),
            "output_schema_id": OUTPUT_SCHEMAS[tid],
        }
    return {"templates": entries}


class PromptRegistry:
    """Read-only set of templates, verified against the manifest on load."""

    def __init__(self, templates: Mapping[TemplateId, PromptTemplate]) -> None:
        self._templates = dict(templates)

    @classmethod
    def load(
        cls, template_dir: Path = TEMPLATE_DIR, manifest_path: Path = MANIFEST_PATH
    ) -> "PromptRegistry":
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))["templates"]
        templates = {}
        for tid in TemplateId:
            entry = manifest.get(tid.value)
            if entry is None:
                raise TemplateManifestMismatch(f"{tid.value} missing from manifest")
            body = (Path(template_dir) / entry["filename"]).read_text(encoding="utf-8")
            digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
            if digest != entry["sha256"]:
                raise TemplateManifestMismatch(
                    f"{entry['filename']}: sha256 {digest[:12]} != manifest {entry['sha256'][:12]}"
                )
            templates[tid] = PromptTemplate(
                tid, body, frozenset(entry["placeholders"]), entry["output_schema_id"]
            )
        return cls(templates)

    def __getitem__(self, tid: TemplateId) -> PromptTemplate:
        return self._templates[tid]

    def render(self, tid: TemplateId, bindings: Mapping[str, str]) -> str:
        return self._templates[tid].render(bindings)

    @property
    def version(self) -> str:
        """Combined hash of all template bodies."""
        h = hashlib.sha256()
        for tid in TemplateId:
            h.update(self._templates[tid].sha256.encode())
        return h.hexdigest()


_default_registry: PromptRegistry | None = None


def default_registry() -> PromptRegistry:
    global _default_registry
    if _default_registry is None:
        _default_registry = PromptRegistry.load()
    return _default_registry


# ---------------------------------------------------------------------------
# guidance


def compose_guidance(
    artifact: "GuidanceArtifact | None",
    category: TaskCategory,
    stage: Stage,
    mode: HpagMode = HpagMode.FULL,
) -> tuple[str, str]:
    """Return the texts bound to ``{GUIDANCE}`` and ``{CATEGORY_GUIDANCE}``."""
    if artifact is None or mode is HpagMode.NONE:
        return GLOBAL_GUIDANCE_SENTINEL, CATEGORY_GUIDANCE_SENTINEL
    global_text = artifact.stage_text(stage) or GLOBAL_GUIDANCE_SENTINEL
    if mode is HpagMode.GLOBAL:
        return global_text, CATEGORY_GUIDANCE_SENTINEL
    if mode is HpagMode.EMPTY_CATEGORY:
        return global_text, ""
    return global_text, artifact.category_stage_text(category, stage) or CATEGORY_GUIDANCE_SENTINEL


def guidance_bindings(guidance: tuple[str, str]) -> dict[str, str]:
    return {"GUIDANCE": guidance[0], "CATEGORY_GUIDANCE": guidance[1]}


# ---------------------------------------------------------------------------
# evidence sections


def _is_remote(ref: str) -> bool:
    return ref.startswith(("http://", "https://", "data:"))


def _screenshot_section(refs: Sequence[str], attach: bool) -> str:
    if not refs or not attach:
        return ""
    for ref in refs:
        if not _is_remote(ref) and not Path(ref).is_file():
            raise UnresolvableAttachment(f"screenshot not found: {ref}")
    lines = "\n".join(image_marker(ref) for ref in refs)
    return f"\n\nScreenshot:\n{lines}\n"


def _output_section(output: str | None) -> str:
    if not output:
        return ""
    return f"\n\nExecution output:\n{output}\n"


def build_evidence_sections(instance: Instance, *, attach_screenshots: bool = True) -> dict[str, str]:
    e = instance.evidence
    return {
        "SCREENSHOT_A_SECTION": _screenshot_section(e.screenshot_refs_a, attach_screenshots),
        "SCREENSHOT_B_SECTION": _screenshot_section(e.screenshot_refs_b, attach_screenshots),
        "VISUAL_A_SECTION": _output_section(e.exec_output_a),
        "VISUAL_B_SECTION": _output_section(e.exec_output_b),
    }


def pair_bindings(
    instance: Instance, *, swapped: bool = False, attach_screenshots: bool = True
) -> dict[str, str]:
    """Instruction, both answers and their evidence sections, optionally in swapped order."""
    answer_a, answer_b = instance.response_a, instance.response_b
    view = instance
    if swapped:
        answer_a, answer_b = answer_b, answer_a
        view = replace(instance, evidence=swap_evidence(instance.evidence))
    return {
        "INSTRUCTION": instance.instruction,
        "ANSWER_A": answer_a,
        "ANSWER_B": answer_b,
        **build_evidence_sections(view, attach_screenshots=attach_screenshots),
    }


def single_bindings(
    instance: Instance, side: str, *, attach_screenshots: bool = True
) -> dict[str, str]:
    """Bindings for a prompt that shows one response on its own."""
    sections = build_evidence_sections(instance, attach_screenshots=attach_screenshots)
    return {
        "INSTRUCTION": instance.instruction,
        "ANSWER": instance.response_a if side == "A" else instance.response_b,
        "SCREENSHOT_SECTION": sections[f"SCREENSHOT_{side}_SECTION"],
        "VISUAL_SECTION": sections[f"VISUAL_{side}_SECTION"],
    }


# ---------------------------------------------------------------------------
# list formatting


def _dump(items: list) -> str:
    return json.dumps(items, indent=2, ensure_ascii=False)


def format_criteria_list(criteria: Iterable[Criterion]) -> str:
    return _dump([{"id": c.id, "criterion": c.statement} for c in criteria])


def format_tied_criteria(tied: Iterable[tuple[Criterion, CriterionJudgment]]) -> str:
    return _dump(
        [
            {"id": c.id, "criterion": c.statement, "tie_rationale": j.rationale}
            for c, j in tied
        ]
    )


def format_rubrics(criteria: Iterable[Criterion]) -> str:
    return _dump([{"id": c.id, "rubric": c.statement} for c in criteria])


def format_criterion_results(pairs: Sequence[tuple[Criterion, CriterionJudgment]]) -> str:
    if not pairs:
        return NO_EVIDENCE_TEXT
    rows = []
    for c, j in pairs:
        row = {"criterion_id": c.id, "criterion": c.statement}
        row.update(
            {
                "judgment": j.verdict.value,
                "confidence": j.confidence.value,
                "rationale": j.rationale,
                "evidence_basis": [e.value for e in j.evidence_used],
                "mapped_aspect": j.mapped_aspect.value,
            }
        )
        rows.append(row)
    return _dump(rows)
