"""Run configuration: gateway, pipeline and harness settings plus named ablation presets."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .core import Stage
from .prompts import HpagMode

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

MODES = ("pairwise", "pointwise", "monolithic")
AGGREGATORS = ("final_judge", "uniform", "weighted")
BATCHING = ("batched", "per_criterion")
ALL_STAGES = frozenset(Stage)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GatewaySettings:
    base_url: str = ""
    model: str = "judge"
    stage_models: Mapping[str, str] = field(default_factory=dict)
    temperature: float = 0.0
    max_tokens: int = 4096
    timeout_s: float = 120.0
    max_attempts: int = 3
    repair_rounds: int = 2
    api_key_env: str = "OPENAI_API_KEY"
    supports_images: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    """Which stages run and how; every ablation row is one of these."""

    mode: str = "pairwise"
    batching: str = "batched"
    btcr: bool = True
    btcr_iterations: int = 2
    btcr_depth: int = 1
    scf: bool = True
    hpag: HpagMode = HpagMode.FULL
    hpag_stages: frozenset[Stage] = ALL_STAGES
    aggregator: str = "final_judge"
    count_range: tuple[int, int] = (16, 20)
    fallback_monolithic: bool = False
    attach_screenshots: bool = True

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.batching not in BATCHING:
            raise ConfigError(f"batching must be one of {BATCHING}, got {self.batching!r}")
        if self.btcr_iterations < 0 or self.btcr_depth < 0:
            raise ConfigError("BTCR iterations and depth must be >= 0")
        lo, hi = self.count_range
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid count_range {self.count_range}")
        object.__setattr__(self, "hpag", HpagMode(self.hpag))
        object.__setattr__(self, "hpag_stages", frozenset(Stage(s) for s in self.hpag_stages))
        object.__setattr__(self, "count_range", tuple(self.count_range))

    @property
    def uses_guidance(self) -> bool:
        return self.hpag is not HpagMode.NONE and bool(self.hpag_stages)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hpag"] = self.hpag.value
        d["hpag_stages"] = sorted(s.value for s in self.hpag_stages)
        d["count_range"] = list(self.count_range)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown pipeline keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "hpag_stages" in kwargs:
            kwargs["hpag_stages"] = frozenset(Stage(s) for s in kwargs["hpag_stages"])
        if "count_range" in kwargs:
            kwargs["count_range"] = tuple(kwargs["count_range"])
        return cls(**kwargs)

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class HarnessSettings:
    workers: int = 1
    failure_policy: str = "count_wrong"  # or "exclude"

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.failure_policy not in ("count_wrong", "exclude"):
            raise ConfigError(f"unknown failure_policy {self.failure_policy!r}")


@dataclass(frozen=True)
class RunConfig:
    gateway: GatewaySettings = field(default_factory=GatewaySettings)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    harness: HarnessSettings = field(default_factory=HarnessSettings)
    guidance_path: str | None = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        unknown = set(data) - {"gateway", "pipeline", "harness"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        pipeline = dict(data.get("pipeline", {}))
        guidance_path = pipeline.pop("guidance", None)
        preset = pipeline.pop("preset", None)
        if preset and preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        base = PRESETS[preset] if preset else PipelineConfig()
        merged = {**base.to_dict(), **pipeline}
        try:
            return cls(
                gateway=GatewaySettings(**data.get("gateway", {})),
                pipeline=PipelineConfig.from_dict(merged),
                harness=HarnessSettings(**data.get("harness", {})),
                guidance_path=guidance_path,
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


_FULL = PipelineConfig()
_PAIRWISE_BASE = replace(_FULL, btcr=False, scf=False, hpag=HpagMode.NONE)

# Component ladder, guidance controls, per-stage injection masks and the
# pointwise aggregator variants.
PRESETS: dict[str, PipelineConfig] = {
    "monolithic": PipelineConfig(mode="monolithic", hpag=HpagMode.NONE, btcr=False, scf=False),
    "pointwise": replace(_PAIRWISE_BASE, mode="pointwise", aggregator="uniform"),
    "pairwise": _PAIRWISE_BASE,
    "pairwise+btcr": replace(_PAIRWISE_BASE, btcr=True),
    "pairwise+btcr+ghpag": replace(_PAIRWISE_BASE, btcr=True, hpag=HpagMode.GLOBAL),
    "pairwise+btcr+ghpag+scf": replace(_FULL, hpag=HpagMode.GLOBAL),
    "full": _FULL,
    "monolithic+ghpag": PipelineConfig(mode="monolithic", hpag=HpagMode.GLOBAL, btcr=False, scf=False),
    "monolithic+chpag": PipelineConfig(mode="monolithic", hpag=HpagMode.FULL, btcr=False, scf=False),
    "full-empty-category": replace(_FULL, hpag=HpagMode.EMPTY_CATEGORY),
    "stages:none": replace(_FULL, hpag_stages=frozenset()),
    "stages:gen": replace(_FULL, hpag_stages=frozenset({Stage.GENERATION})),
    "stages:judge": replace(_FULL, hpag_stages=frozenset({Stage.CRITERION_JUDGING})),
    "stages:gen+judge": replace(
        _FULL, hpag_stages=frozenset({Stage.GENERATION, Stage.CRITERION_JUDGING})
    ),
    "stages:all": _FULL,
    "pointwise-uniform": replace(_PAIRWISE_BASE, mode="pointwise", aggregator="uniform"),
    "pointwise-weighted": replace(_PAIRWISE_BASE, mode="pointwise", aggregator="weighted"),
    "pointwise-final": replace(_PAIRWISE_BASE, mode="pointwise", aggregator="final_judge"),
}
