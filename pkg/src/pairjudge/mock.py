"""A deterministic synthetic judge for offline runs and tests.

The judge reads the rendered prompt, dispatches on the request tag, and
answers with schema-valid JSON. Every decision is a hash of the visible
content, so identical prompts always get identical answers and the pairwise
verdicts are exactly order-consistent unless a position bias is injected.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from typing import Any, Callable

from .core import HUMAN_ASPECTS, Aspect
from .gateway import ChatRequest
from .guidance import REFERENCE_GUIDANCE_PATH

_INSTRUCTION_RE = re.compile(r"<\|Instruction\|>\n(.*?)\n\n<\|", re.DOTALL)
_ANSWER_RE = {
    side: re.compile(
        rf"<\|The Start of Assistant {side}'s Answer\|>\n(.*?)<\|The End of Assistant {side}'s Answer\|>",
        re.DOTALL,
    )
    for side in ("A", "B")
}
_SINGLE_ANSWER_RE = re.compile(
    r"<\|The Start of Assistant's Answer\|>\n(.*?)<\|The End of Assistant's Answer\|>", re.DOTALL
)
_JUDGMENT_RE = re.compile(r'"judgment": "(A|B|tie|insufficient_evidence)"')
_POINTWISE_RE = re.compile(r'"(A|B)_satisfies": "(YES|NO)"')
_VOTE_RE = re.compile(r"\*\*Human Overall Vote:\*\* (A|B|Tie)")

_ASPECTS = [a.value for a in Aspect if a is not Aspect.OTHERS]


def unit_hash(*parts: str) -> float:
    """Map strings to a uniform number in [0, 1)."""
    h = hashlib.sha256("\x1f".join(parts).encode("utf-8")).hexdigest()
    return int(h[:13], 16) / 16**13


def _json_after(text: str, header: str) -> Any:
    start = text.rfind(header)
    if start == -1:
        return None
    i = text.find("[", start + len(header))
    if i == -1:
        return None
    try:
        value, _ = json.JSONDecoder().raw_decode(text, i)
    except json.JSONDecodeError:
        return None
    return value


def _match(rx: re.Pattern, text: str) -> str:
    m = rx.search(text)
    return m.group(1) if m else ""


@dataclass
class SyntheticJudge:
    """Callable backend script: ``MockBackend(SyntheticJudge())``.

    ``position_bias`` is the probability that a pairwise criterion verdict is
    "A" regardless of content. ``honest`` picks the unbiased behaviour:
    ``"content"`` compares hashed per-response quality, ``"tie"`` always ties.
    """

    seed: int = 0
    n_criteria: int = 16
    tie_margin: float = 0.15
    position_bias: float = 0.0
    honest: str = "content"
    redundancy_rate: float = 0.2
    conflict_rate: float = 0.1
    children_per_tie: int = 2

    def __call__(self, req: ChatRequest) -> str:
        handler = self._handlers().get(req.request_tag)
        if handler is None:
            return "{}"
        return json.dumps(handler(req.prompt_text), ensure_ascii=False)

    def _handlers(self) -> dict[str, Callable[[str], Any]]:
        return {
            "criterion_generation": self.generate,
            "criterion_judging_forward": self.judge_pairwise,
            "criterion_judging_backward": self.judge_pairwise,
            "criterion_rejudging": self.judge_pairwise,
            "tie_decomposition": self.decompose,
            "redundancy_filter": lambda p: self.filter(p, "redundant", self.redundancy_rate),
            "conflict_filter": lambda p: self.filter(p, "conflicting", self.conflict_rate),
            "final_judge": self.final,
            "monolithic_judge": self.final,
            "pointwise_judging": self.judge_pointwise,
            "weight_assignment": self.weights,
            "human_rationale": self.human_rationale,
            "guidance_synthesis": self.synthesize,
        }

    # -- helpers

    def _h(self, *parts: str) -> float:
        return unit_hash(str(self.seed), *parts)

    def quality(self, instruction: str, answer: str, criterion: str) -> float:
        return self._h("quality", instruction, answer, criterion)

    def pairwise_verdict(self, instruction: str, first: str, second: str, criterion: str) -> str:
        if self.position_bias > 0 and self._h("bias", instruction, first, second, criterion) < self.position_bias:
            return "A"
        if self.honest == "tie":
            return "tie"
        d = self.quality(instruction, first, criterion) - self.quality(instruction, second, criterion)
        if d > self.tie_margin:
            return "A"
        if d < -self.tie_margin:
            return "B"
        return "tie"

    # -- stage handlers

    def generate(self, prompt: str) -> dict:
        instruction = _match(_INSTRUCTION_RE, prompt)
        out = []
        for i in range(1, self.n_criteria + 1):
            aspect = _ASPECTS[int(self._h("gen-aspect", instruction, str(i)) * len(_ASPECTS))]
            out.append(
                {
                    "id": f"c{i}",
                    "criterion": f"The response addresses requirement {i} of the task with respect to {aspect}.",
                    "rationale": f"Requirement {i} distinguishes the two responses.",
                    "evidence_basis": ["instruction", "code"],
                }
            )
        return {"criteria": out}

    def judge_pairwise(self, prompt: str) -> dict:
        instruction = _match(_INSTRUCTION_RE, prompt)
        first, second = _match(_ANSWER_RE["A"], prompt), _match(_ANSWER_RE["B"], prompt)
        criteria = _json_after(prompt, "**Criteria to evaluate:**") or []
        results = []
        for c in criteria:
            v = self.pairwise_verdict(instruction, first, second, c["criterion"])
            aspect = _ASPECTS[int(self._h("aspect", c["criterion"]) * len(_ASPECTS))]
            results.append(
                {
                    "criterion_id": c["id"],
                    "judgment": v,
                    "confidence": "medium" if v == "tie" else "high",
                    "rationale": f"Comparison on: {c['criterion'][:60]}",
                    "evidence_basis": ["code"],
                    "mapped_aspect": aspect,
                }
            )
        return {"criterion_results": results}

    def decompose(self, prompt: str) -> dict:
        tied = _json_after(prompt, "<|Tied Criteria") or []
        out = []
        for c in tied:
            subs = [
                {
                    "criterion": f"{c['criterion']} Sub-check {j}: detail {j} of this requirement.",
                    "rationale": f"Finer distinction {j} for {c['id']}.",
                    "evidence_basis": ["code"],
                }
                for j in range(1, self.children_per_tie + 1)
            ]
            out.append({"parent_id": c["id"], "sub_criteria": subs})
        return {"decompositions": out}

    def filter(self, prompt: str, flag: str, rate: float) -> dict:
        new = _json_after(prompt, "<|New Rubrics to Check|>") or []
        return {
            "results": [
                {"id": r["id"], flag: self._h(flag, r["rubric"]) < rate, "reason": "synthetic check"}
                for r in new
            ]
        }

    def final(self, prompt: str) -> dict:
        header = "**Per-Criterion Evaluation Results**"
        pos = prompt.rfind(header)
        tail = prompt[pos:] if pos != -1 else ""
        votes = _JUDGMENT_RE.findall(tail)
        a, b = votes.count("A"), votes.count("B")
        for side, answer in _POINTWISE_RE.findall(tail):
            if answer == "YES":
                a += side == "A"
                b += side == "B"
        if a == b:
            instruction = _match(_INSTRUCTION_RE, prompt)
            qa = self.quality(instruction, _match(_ANSWER_RE["A"], prompt), "overall")
            qb = self.quality(instruction, _match(_ANSWER_RE["B"], prompt), "overall")
            winner = "A" if qa - qb > self.tie_margin else "B" if qb - qa > self.tie_margin else "Tie"
        else:
            winner = "A" if a > b else "B"
        return {"Overall": {"winner": winner, "reasoning": f"Criterion tally A={a}, B={b}."}}

    def judge_pointwise(self, prompt: str) -> dict:
        instruction = _match(_INSTRUCTION_RE, prompt)
        answer = _match(_SINGLE_ANSWER_RE, prompt)
        criteria = _json_after(prompt, "**Criteria to evaluate:**") or []
        return {
            "criterion_results": [
                {
                    "criterion_id": c["id"],
                    "decision": "YES" if self.quality(instruction, answer, c["criterion"]) >= 0.5 else "NO",
                    "rationale": "synthetic check",
                }
                for c in criteria
            ]
        }

    def weights(self, prompt: str) -> dict:
        criteria = _json_after(prompt, "<|Criteria|>") or []
        return {
            "weights": [
                {"criterion_id": c["id"], "weight": round(0.1 + self._h("w", c["criterion"]), 4)}
                for c in criteria
            ]
        }

    def human_rationale(self, prompt: str) -> dict:
        vote = _match(_VOTE_RE, prompt) or "Tie"
        votes_start = prompt.find("**Human Aspect Votes:**")
        try:
            votes, _ = json.JSONDecoder().raw_decode(prompt, prompt.index("{", votes_start))
        except (ValueError, json.JSONDecodeError):
            votes = {}
        analysis = {
            a.value: {
                "vote": votes.get(a.value),
                "importance": "high" if votes.get(a.value) == vote else "medium",
                "explanation": f"The human vote on {a.value} was {votes.get(a.value)}.",
            }
            for a in HUMAN_ASPECTS
        }
        decisive = [k for k, v in analysis.items() if v["vote"] == vote][:3] or ["correctness"]
        sentence = (
            f"The evaluator preferred {vote} because the decisive aspects favoured it in practice. "
        )
        reasoning = (sentence * 12).strip()
        return {
            "reasoning": reasoning,
            "key_factors": [f"{d} favoured {vote}" for d in decisive][:5] or ["overall impression"],
            "primary_aspect": decisive[0],
            "aspect_analysis": analysis,
            "decisive_aspects": decisive,
        }

    def synthesize(self, prompt: str) -> dict:
        return json.loads(REFERENCE_GUIDANCE_PATH.read_text(encoding="utf-8"))
