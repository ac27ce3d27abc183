"""Dataset ingestion, deterministic splits, metrics and the resumable pipeline runner."""

from __future__ import annotations

import hashlib
import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Collection, Iterable, Mapping, Sequence

from .aggregation import (
    DecisionMethod,
    FinalDecision,
    PointwiseScores,
    WeightsMode,
    assign_weights,
    final_judge,
    pointwise_decision,
    pointwise_final_judge,
    pointwise_judge,
)
from .config import PipelineConfig, RunConfig
from .context import JudgeContext
from .core import (
    Aspect,
    Criterion,
    CriterionJudgment,
    EvidenceBundle,
    Instance,
    InvalidInstance,
    PairJudgeError,
    PreferenceLabel,
    Stage,
    TaskCategory,
    UnknownVoteToken,
    DEFAULT_VOTE_MAP,
    map_raw_label,
)
from .criteria import GenerationFailed, generate_criteria, judge_criteria
from .gateway import ConfigurationError, Gateway, HTTPBackend, MockBackend, RunStore
from .guidance import GuidanceArtifact, run_monolithic
from .prompts import PromptRegistry, compose_guidance, default_registry
from .refinement import CallCounter, RefinementState, refine
from .swap import EvidenceSet, scf_filter

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"
LABELS = (PreferenceLabel.A, PreferenceLabel.B, PreferenceLabel.TIE)


class MalformedLine(PairJudgeError):
    def __init__(self, message: str, line_no: int) -> None:
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class MissingPredictions(PairJudgeError):
    def __init__(self, ids: Sequence[str]) -> None:
        super().__init__(f"{len(ids)} validation id(s) lack a prediction: {list(ids)[:10]}")
        self.ids = list(ids)


def _canonical(value) -> str:
    return json.dumps(value, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


# ---------------------------------------------------------------------------
# dataset


def instance_from_record(
    obj: Mapping, vote_map: Mapping[str, PreferenceLabel] = DEFAULT_VOTE_MAP
) -> Instance:
    for key in ("id", "instruction", "response_a", "response_b", "category"):
        if key not in obj:
            raise InvalidInstance(f"missing field {key!r}")
    human = obj.get("human") or {}
    overall = human.get("overall_vote")
    aspects = {}
    for k, v in (human.get("aspect_votes") or {}).items():
        aspects[Aspect(k)] = map_raw_label(v, vote_map) if v is not None else None
    return Instance(
        id=str(obj["id"]),
        instruction=obj["instruction"],
        response_a=obj["response_a"],
        response_b=obj["response_b"],
        category=TaskCategory.parse(obj["category"]),
        evidence=EvidenceBundle.from_dict(obj.get("evidence")),
        human_overall=map_raw_label(overall, vote_map) if overall is not None else None,
        human_aspect_votes=aspects,
    )


def instance_to_record(inst: Instance) -> dict:
    return {
        "id": inst.id,
        "instruction": inst.instruction,
        "response_a": inst.response_a,
        "response_b": inst.response_b,
        "category": inst.category.value,
        "evidence": inst.evidence.to_dict(),
        "human": {
            "overall_vote": inst.human_overall.value if inst.human_overall else None,
            "aspect_votes": {
                a.value: (v.value if v else None) for a, v in inst.human_aspect_votes.items()
            },
        },
    }


@dataclass(frozen=True)
class Dataset:
    instances: tuple[Instance, ...]
    source_path: str | None = None
    format_version: str = FORMAT_VERSION
    skipped: int = 0

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for inst in self.instances:
            if inst.id in seen:
                raise InvalidInstance(f"duplicate instance id {inst.id!r}")
            seen.add(inst.id)

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def ids(self) -> list[str]:
        return [i.id for i in self.instances]

    def by_id(self) -> dict[str, Instance]:
        return {i.id: i for i in self.instances}

    def subset(self, ids: Collection[str]) -> "Dataset":
        keep = set(ids)
        return Dataset(tuple(i for i in self.instances if i.id in keep), self.source_path)

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        for inst in sorted(self.instances, key=lambda i: i.id):
            h.update(_canonical(instance_to_record(inst)).encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


def ingest(
    path: str | Path,
    *,
    strict: bool = True,
    vote_map: Mapping[str, PreferenceLabel] = DEFAULT_VOTE_MAP,
) -> Dataset:
    """Load a JSONL file, one instance per line.

    Strict mode raises on the first bad line; lenient mode skips it and
    counts it in ``Dataset.skipped``. Screenshot paths are not checked here.
    """
    instances: list[Instance] = []
    seen: set[str] = set()
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise MalformedLine(f"invalid JSON: {exc.msg}", line_no) from None
                if not isinstance(obj, dict):
                    raise MalformedLine("expected a JSON object", line_no)
                try:
                    inst = instance_from_record(obj, vote_map)
                except UnknownVoteToken as exc:
                    raise UnknownVoteToken(f"line {line_no}: {exc}") from None
                except (InvalidInstance, ValueError, KeyError, TypeError) as exc:
                    raise MalformedLine(str(exc), line_no) from None
                if inst.id in seen:
                    raise MalformedLine(f"duplicate id {inst.id!r}", line_no)
            except (MalformedLine, UnknownVoteToken) as exc:
                if strict:
                    raise
                logger.warning("skipping %s", exc)
                skipped += 1
                continue
            seen.add(inst.id)
            instances.append(inst)
    return Dataset(tuple(instances), str(path), FORMAT_VERSION, skipped)


def write_jsonl(instances: Iterable[Instance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_record(inst), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# split


@dataclass(frozen=True)
class SplitManifest:
    seed: int
    train_fraction: float
    train_ids: frozenset[str]
    val_ids: frozenset[str]
    dataset_hash: str = ""

    def __post_init__(self) -> None:
        if self.train_ids & self.val_ids:
            raise ValueError("train and validation ids overlap")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "dataset_hash": self.dataset_hash,
            "train_ids": sorted(self.train_ids),
            "val_ids": sorted(self.val_ids),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SplitManifest":
        return cls(
            data["seed"],
            data["train_fraction"],
            frozenset(data["train_ids"]),
            frozenset(data["val_ids"]),
            data.get("dataset_hash", ""),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def train_size(n: int, train_fraction: float) -> int:
    """Round-to-nearest share, kept inside [1, n-1] so neither side is empty."""
    if n < 2:
        raise ValueError("need at least two instances to split")
    return min(max(round(n * train_fraction), 1), n - 1)


def split(dataset: Dataset, seed: int, train_fraction: float = 0.2) -> SplitManifest:
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    ids = sorted(dataset.ids)
    random.Random(seed).shuffle(ids)
    k = train_size(len(ids), train_fraction)
    return SplitManifest(seed, train_fraction, frozenset(ids[:k]), frozenset(ids[k:]), dataset.content_hash)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    method: str
    n: int
    overall_accuracy: float
    per_category: dict[str, float]
    confusion: list[list[int]]
    failed: list[str] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "n": self.n,
            "overall_accuracy": self.overall_accuracy,
            "per_category": dict(self.per_category),
            "labels": [l.value for l in LABELS],
            "confusion": [list(r) for r in self.confusion],
            "failed": list(self.failed),
            "excluded": list(self.excluded),
        }


def accuracy(
    predictions: Mapping[str, PreferenceLabel | None],
    val_ids: Collection[str],
    dataset: Dataset,
    *,
    method: str = "",
    exclude_failed: bool = False,
) -> MetricsReport:
    """Exact three-way agreement with the human vote.

    A ``None`` prediction marks a failed instance: it counts as wrong, or is
    left out (and listed) when ``exclude_failed`` is set. The confusion
    matrix (true rows x predicted columns) holds scored predictions only.
    """
    missing = sorted(i for i in val_ids if i not in predictions)
    if missing:
        raise MissingPredictions(missing)
    by_id = dataset.by_id()
    idx = {l: k for k, l in enumerate(LABELS)}
    confusion = [[0] * 3 for _ in LABELS]
    cat_total: dict[str, int] = {}
    cat_right: dict[str, int] = {}
    failed, excluded = [], []
    n = correct = 0
    for iid in sorted(val_ids):
        inst = by_id[iid]
        if inst.human_overall is None:
            raise InvalidInstance(f"{iid}: validation instance has no human vote")
        pred = predictions[iid]
        if pred is None:
            failed.append(iid)
            if exclude_failed:
                excluded.append(iid)
                continue
        n += 1
        cat = inst.category.value
        cat_total[cat] = cat_total.get(cat, 0) + 1
        if pred is not None:
            confusion[idx[inst.human_overall]][idx[pred]] += 1
        if pred is inst.human_overall:
            correct += 1
            cat_right[cat] = cat_right.get(cat, 0) + 1
    return MetricsReport(
        method=method,
        n=n,
        overall_accuracy=correct / n if n else 0.0,
        per_category={c: cat_right.get(c, 0) / t for c, t in sorted(cat_total.items())},
        confusion=confusion,
        failed=failed,
        excluded=excluded,
    )


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineResult:
    """Everything produced for one instance. Only deterministic fields are stored."""

    instance_id: str
    category: TaskCategory
    status: str = "ok"
    decision: FinalDecision | None = None
    criteria: list[Criterion] = field(default_factory=list)
    active_ids: list[str] = field(default_factory=list)
    forward: list[CriterionJudgment] = field(default_factory=list)
    backward: list[CriterionJudgment] = field(default_factory=list)
    evidence: EvidenceSet | None = None
    refinement_rounds: list[dict] = field(default_factory=list)
    calls: CallCounter = field(default_factory=CallCounter)
    pointwise: PointwiseScores | None = None
    warnings: list[str] = field(default_factory=list)
    call_log: list[dict] = field(default_factory=list)
    error: str | None = None

    @property
    def prediction(self) -> PreferenceLabel | None:
        return self.decision.winner if self.decision else None

    @property
    def stage_tags(self) -> list[str]:
        return [c["tag"] for c in self.call_log]

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "category": self.category.value,
            "status": self.status,
            "decision": self.decision.to_dict() if self.decision else None,
            "criteria": [c.to_dict() for c in self.criteria],
            "active_ids": list(self.active_ids),
            "forward": [j.to_dict() for j in self.forward],
            "backward": [j.to_dict() for j in self.backward],
            "evidence": self.evidence.to_dict() if self.evidence else None,
            "refinement_rounds": list(self.refinement_rounds),
            "calls": self.calls.to_dict(),
            "pointwise": self.pointwise.to_dict() if self.pointwise else None,
            "warnings": list(self.warnings),
            "call_log": list(self.call_log),
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineResult":
        pw = d.get("pointwise")
        return cls(
            instance_id=d["instance_id"],
            category=TaskCategory(d["category"]),
            status=d["status"],
            decision=FinalDecision.from_dict(d["decision"]) if d.get("decision") else None,
            criteria=[Criterion.from_dict(c) for c in d.get("criteria", [])],
            active_ids=list(d.get("active_ids", [])),
            forward=[CriterionJudgment.from_dict(j) for j in d.get("forward", [])],
            backward=[CriterionJudgment.from_dict(j) for j in d.get("backward", [])],
            evidence=EvidenceSet.from_dict(d["evidence"]) if d.get("evidence") else None,
            refinement_rounds=list(d.get("refinement_rounds", [])),
            calls=CallCounter(**d.get("calls", {})),
            pointwise=PointwiseScores(
                tuple(pw["criterion_ids"]),
                tuple(pw["score_a"]),
                tuple(pw["score_b"]),
                tuple(pw["weights"]),
                tuple(pw["degraded"]),
            )
            if pw
            else None,
            warnings=list(d.get("warnings", [])),
            call_log=list(d.get("call_log", [])),
            error=d.get("error"),
        )


def _guidance_fn(config: PipelineConfig, artifact: GuidanceArtifact | None, category: TaskCategory):
    def g(stage: Stage) -> tuple[str, str]:
        art = artifact if stage in config.hpag_stages else None
        return compose_guidance(art, category, stage, config.hpag)

    return g


def _run_pairwise(ctx, inst, config, g, result: PipelineResult) -> FinalDecision:
    cset = generate_criteria(ctx, inst, g(Stage.GENERATION), count_range=config.count_range)
    fwd = judge_criteria(
        ctx, inst, cset.criteria, g(Stage.CRITERION_JUDGING), batching=config.batching
    )
    state = RefinementState.initial(cset.criteria, fwd)
    if config.btcr:
        state, result.calls = refine(
            ctx,
            inst,
            state,
            g(Stage.CRITERION_JUDGING),
            config.btcr_iterations,
            depth_limit=config.btcr_depth,
            batching=config.batching,
        )
    result.criteria = list(state.all_criteria.values())
    result.active_ids = [c.id for c in state.active_criteria]
    result.forward = list(state.judgments.values())
    result.refinement_rounds = list(state.rounds)
    pairs = state.evidence()
    if config.scf:
        evidence, result.backward = scf_filter(
            ctx, inst, pairs, g(Stage.CRITERION_JUDGING), batching=config.batching
        )
    else:
        evidence = EvidenceSet.unfiltered(pairs)
    result.evidence = evidence
    return final_judge(ctx, inst, evidence, g(Stage.FINAL_JUDGING))


def _run_pointwise(ctx, inst, config, g, result: PipelineResult) -> FinalDecision:
    cset = generate_criteria(ctx, inst, g(Stage.GENERATION), count_range=config.count_range)
    result.criteria = list(cset.criteria)
    result.active_ids = [c.id for c in cset.criteria]
    scores = pointwise_judge(ctx, inst, cset.criteria, g(Stage.CRITERION_JUDGING))
    if config.aggregator == "weighted":
        scores = scores.with_weights(assign_weights(ctx, inst, cset.criteria))
    result.pointwise = scores
    if config.aggregator == "final_judge":
        return pointwise_final_judge(ctx, inst, cset.criteria, scores, g(Stage.FINAL_JUDGING))
    mode = WeightsMode.UNIFORM if config.aggregator == "uniform" else WeightsMode.LLM_ASSIGNED
    return pointwise_decision(scores, mode)


def _run_monolithic(ctx, inst, g) -> FinalDecision:
    label, reasoning = run_monolithic(ctx, inst, g(Stage.FINAL_JUDGING))
    return FinalDecision(label, reasoning, DecisionMethod.MONOLITHIC)


def process_instance(
    ctx: JudgeContext,
    inst: Instance,
    config: PipelineConfig,
    artifact: GuidanceArtifact | None = None,
) -> PipelineResult:
    """Run one instance; errors are captured in the result, never raised."""
    ctx = ctx.for_instance()
    result = PipelineResult(inst.id, inst.category)
    g = _guidance_fn(config, artifact, inst.category)
    try:
        if config.mode == "monolithic":
            result.decision = _run_monolithic(ctx, inst, g)
        elif config.mode == "pointwise":
            result.decision = _run_pointwise(ctx, inst, config, g, result)
        else:
            result.decision = _run_pairwise(ctx, inst, config, g, result)
    except GenerationFailed as exc:
        if config.fallback_monolithic:
            ctx.warn(f"{inst.id}: {exc}; falling back to the monolithic judge")
            result.decision = _run_monolithic(ctx, inst, g)
        else:
            result.status, result.error = "failed", str(exc)
    except Exception as exc:  # one bad instance must not abort the run
        logger.exception("%s: pipeline failed", inst.id)
        result.status, result.error = "failed", f"{type(exc).__name__}: {exc}"
    result.warnings = list(ctx.warnings)
    result.call_log = list(ctx.log)
    return result


def make_context(
    gateway: Gateway, run_config: RunConfig, registry: PromptRegistry | None = None
) -> JudgeContext:
    gs = run_config.gateway
    return JudgeContext(
        gateway=gateway,
        registry=registry or default_registry(),
        model=gs.model,
        stage_models=dict(gs.stage_models),
        temperature=gs.temperature,
        max_tokens=gs.max_tokens,
        repair_rounds=gs.repair_rounds,
        attach_screenshots=run_config.pipeline.attach_screenshots,
    )


def open_gateway(backend, run_dir: str | Path | None, *, max_attempts: int = 3, sleep=None) -> Gateway:
    """Gateway whose cache and transcript live under ``run_dir`` (memory-only when None)."""
    kwargs = {"max_attempts": max_attempts}
    if sleep is not None:
        kwargs["sleep"] = sleep
    if run_dir is None:
        return Gateway(backend, RunStore(), **kwargs)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return Gateway(backend, RunStore(run_dir), transcript_path=run_dir / "transcript.jsonl", **kwargs)


def make_backend(kind: str, settings, *, seed: int = 0):
    """``mock`` gives the synthetic judge; ``http`` talks to ``settings.base_url``."""
    if kind == "mock":
        from .mock import SyntheticJudge

        return MockBackend(SyntheticJudge(seed=seed))
    if kind == "http":
        if not settings.base_url:
            raise ConfigurationError("gateway.base_url is required for the http backend")
        return HTTPBackend(
            settings.base_url,
            api_key_env=settings.api_key_env,
            timeout=settings.timeout_s,
            supports_images=settings.supports_images,
        )
    raise ConfigurationError(f"unknown backend {kind!r}")


def run_pipeline(
    dataset: Dataset,
    ids: Collection[str],
    run_config: RunConfig,
    gateway: Gateway,
    *,
    artifact: GuidanceArtifact | None = None,
    run_dir: str | Path | None = None,
    registry: PromptRegistry | None = None,
) -> list[PipelineResult]:
    """Process ``ids`` and return results sorted by instance id.

    With ``run_dir`` set, results are written to ``results.jsonl`` there;
    rerunning against the same directory is served from the call cache.
    """
    config = run_config.pipeline
    if config.uses_guidance and artifact is None:
        raise ConfigurationError("this configuration injects guidance but no artifact was loaded")
    by_id = dataset.by_id()
    unknown = sorted(set(ids) - by_id.keys())
    if unknown:
        raise KeyError(f"ids not in dataset: {unknown[:5]}")
    ctx = make_context(gateway, run_config, registry)
    todo = [by_id[i] for i in sorted(ids)]
    workers = run_config.harness.workers
    if workers == 1:
        results = [process_instance(ctx, inst, config, artifact) for inst in todo]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda inst: process_instance(ctx, inst, config, artifact), todo))
    if run_dir is not None:
        write_results(results, Path(run_dir) / "results.jsonl")
        (Path(run_dir) / "config.json").write_text(
            json.dumps({"pipeline": config.to_dict(), "registry_version": ctx.registry.version},
                       indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    return results


def write_results(results: Sequence[PipelineResult], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in sorted(results, key=lambda r: r.instance_id):
            fh.write(_canonical(r.to_dict()) + "\n")


def read_results(path: str | Path) -> list[PipelineResult]:
    with open(path, encoding="utf-8") as fh:
        return [PipelineResult.from_dict(json.loads(line)) for line in fh if line.strip()]


def predictions_of(results: Iterable[PipelineResult]) -> dict[str, PreferenceLabel | None]:
    return {r.instance_id: r.prediction for r in results}
