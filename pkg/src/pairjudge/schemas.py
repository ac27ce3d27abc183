"""JSON schemas for every structured model output, keyed by schema id."""

from __future__ import annotations

from typing import Any

_TEXT = {"type": "string", "pattern": r"\S"}
_EVIDENCE = {
    "type": "array",
    "items": {"enum": ["instruction", "code", "execution_output", "screenshot"]},
}
_EVIDENCE_NONEMPTY = {**_EVIDENCE, "minItems": 1}
_VERDICT = {"enum": ["A", "B", "tie", "insufficient_evidence"]}
_CONFIDENCE = {"enum": ["high", "medium", "low"]}
_ASPECT = {
    "enum": [
        "correctness",
        "efficiency",
        "explainability",
        "maintainability",
        "ui_ux_design",
        "OTHERS",
    ]
}
_WINNER = {"enum": ["A", "B", "Tie"]}

_OVERALL = {
    "type": "object",
    "required": ["Overall"],
    "properties": {
        "Overall": {
            "type": "object",
            "required": ["winner", "reasoning"],
            "properties": {"winner": _WINNER, "reasoning": _TEXT},
        }
    },
}

_ASPECT_ENTRY = {
    "type": "object",
    "required": ["vote", "importance", "explanation"],
    "properties": {
        "vote": {"enum": ["A", "B", "Tie", None]},
        "importance": {"enum": ["high", "medium", "low", "not_applicable"]},
        "explanation": {"type": "string"},
    },
}

_HUMAN_ASPECT_KEYS = [
    "correctness",
    "efficiency",
    "explainability",
    "maintainability",
    "ui_ux_design",
]

_STAGE_BLOCK = {
    "type": "object",
    "required": [
        "key_divergence_patterns",
        "criterion_generation_guidance",
        "criterion_judging_guidance",
        "final_judging_guidance",
    ],
    "properties": {
        "key_divergence_patterns": {"type": "array", "minItems": 1, "items": _TEXT},
        "criterion_generation_guidance": _TEXT,
        "criterion_judging_guidance": _TEXT,
        "final_judging_guidance": _TEXT,
    },
}

CATEGORY_KEYS = [
    "web_development",
    "game_development",
    "creative_coding",
    "diagram_creation",
    "scientific_computing",
    "problem_solving",
]

SCHEMAS: dict[str, dict[str, Any]] = {
    "criteria": {
        "type": "object",
        "required": ["criteria"],
        "properties": {
            "criteria": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "required": ["id", "criterion", "rationale", "evidence_basis"],
                    "properties": {
                        "id": {"type": "string", "pattern": r"^c[0-9]+$"},
                        "criterion": _TEXT,
                        "rationale": _TEXT,
                        "evidence_basis": _EVIDENCE_NONEMPTY,
                    },
                },
            }
        },
    },
    "criterion_judging": {
        "type": "object",
        "required": ["criterion_results"],
        "properties": {
            "criterion_results": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["criterion_id", "judgment", "confidence", "mapped_aspect"],
                    "properties": {
                        "criterion_id": {"type": "string"},
                        "judgment": _VERDICT,
                        "confidence": _CONFIDENCE,
                        "rationale": {"type": "string"},
                        "evidence_basis": _EVIDENCE,
                        "mapped_aspect": _ASPECT,
                    },
                },
            }
        },
    },
    "tie_decomposition": {
        "type": "object",
        "required": ["decompositions"],
        "properties": {
            "decompositions": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["parent_id", "sub_criteria"],
                    "properties": {
                        "parent_id": {"type": "string"},
                        "sub_criteria": {
                            "type": "array",
                            "items": {
                                "type": "object",
                                "required": ["criterion", "evidence_basis"],
                                "properties": {
                                    "criterion": _TEXT,
                                    "rationale": {"type": "string"},
                                    "evidence_basis": _EVIDENCE_NONEMPTY,
                                },
                            },
                        },
                    },
                },
            }
        },
    },
    "redundancy_filter": {
        "type": "object",
        "required": ["results"],
        "properties": {
            "results": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["id", "redundant"],
                    "properties": {"id": {"type": "string"}, "redundant": {"type": "boolean"}},
                },
            }
        },
    },
    "conflict_filter": {
        "type": "object",
        "required": ["results"],
        "properties": {
            "results": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["id", "conflicting"],
                    "properties": {"id": {"type": "string"}, "conflicting": {"type": "boolean"}},
                },
            }
        },
    },
    "final_judge": _OVERALL,
    "monolithic_judge": _OVERALL,
    "pointwise_judging": {
        "type": "object",
        "required": ["criterion_results"],
        "properties": {
            "criterion_results": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["criterion_id", "decision"],
                    "properties": {
                        "criterion_id": {"type": "string"},
                        "decision": {"enum": ["YES", "NO"]},
                        "rationale": {"type": "string"},
                    },
                },
            }
        },
    },
    "weight_assignment": {
        "type": "object",
        "required": ["weights"],
        "properties": {
            "weights": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["criterion_id", "weight"],
                    "properties": {
                        "criterion_id": {"type": "string"},
                        "weight": {"type": "number"},
                    },
                },
            }
        },
    },
    "human_rationale": {
        "type": "object",
        "required": [
            "reasoning",
            "key_factors",
            "primary_aspect",
            "aspect_analysis",
            "decisive_aspects",
        ],
        "properties": {
            "reasoning": {"type": "string"},
            "key_factors": {"type": "array", "items": {"type": "string"}},
            "primary_aspect": {
                "enum": _HUMAN_ASPECT_KEYS + ["visual_output", "completeness"],
            },
            "aspect_analysis": {
                "type": "object",
                "required": _HUMAN_ASPECT_KEYS,
                "properties": {k: _ASPECT_ENTRY for k in _HUMAN_ASPECT_KEYS},
            },
            "decisive_aspects": {"type": "array", "items": {"type": "string"}},
        },
    },
    "guidance_synthesis": {
        **_STAGE_BLOCK,
        "required": _STAGE_BLOCK["required"] + ["category_specific_guidance"],
        "properties": {
            **_STAGE_BLOCK["properties"],
            "category_specific_guidance": {
                "type": "object",
                "required": CATEGORY_KEYS,
                "properties": {k: _STAGE_BLOCK for k in CATEGORY_KEYS},
            },
        },
    },
}
