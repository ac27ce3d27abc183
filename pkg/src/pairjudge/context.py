"""Per-run settings and per-instance call bookkeeping shared by the stages."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

from .gateway import ChatRequest, Gateway
from .prompts import PromptRegistry, TemplateId, default_registry

logger = logging.getLogger(__name__)


@dataclass
class JudgeContext:
    """Everything a stage needs to issue model calls.

    ``log`` and ``warnings`` are per-instance lists; use :meth:`for_instance`
    to get a copy with fresh ones before processing an instance.
    """

    gateway: Gateway
    registry: PromptRegistry = field(default_factory=default_registry)
    model: str = "judge"
    stage_models: Mapping[str, str] = field(default_factory=dict)
    temperature: float = 0.0
    max_tokens: int = 4096
    repair_rounds: int = 2
    attach_screenshots: bool = True
    log: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def for_instance(self) -> "JudgeContext":
        return replace(self, log=[], warnings=[])

    def model_for(self, tag: str) -> str:
        return self.stage_models.get(tag, self.model)

    def warn(self, message: str) -> None:
        logger.warning(message)
        self.warnings.append(message)

    def request(self, tid: TemplateId, bindings: Mapping[str, str], tag: str) -> ChatRequest:
        prompt = self.registry.render(tid, bindings)
        return ChatRequest.from_prompt(
            self.model_for(tag),
            prompt,
            tag,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
        )

    def call(self, tid: TemplateId, bindings: Mapping[str, str], tag: str) -> Any:
        """Render, call and validate; raises StructuredOutputFailed when repairs run out."""
        req = self.request(tid, bindings, tag)
        schema_id = self.registry[tid].output_schema_id
        return self.gateway.complete_structured(req, schema_id, self.repair_rounds, log=self.log)
