"""Tables and figures for finished runs: accuracy, confusion, position bias, refinement cost."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import LABELS, MetricsReport, PipelineResult  # noqa: E402
from .refinement import CallCounter  # noqa: E402
from .swap import BiasLevel, BiasReport, BiasStage, EmptyInput, bias_stats, pool_shrink  # noqa: E402


def _write_tsv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _write_json(path: Path, value) -> Path:
    path.write_text(json.dumps(value, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# position bias


def bias_reports(results: Sequence[PipelineResult]) -> list[BiasReport]:
    """Pre/post filtering reports at criterion and sample level (missing stages skipped)."""
    out = []
    usable = [r for r in results if r.evidence is not None]
    for level in (BiasLevel.CRITERION, BiasLevel.SAMPLE):
        for stage in (BiasStage.PRE_SCF, BiasStage.POST_SCF):
            try:
                out.append(bias_stats(usable, level, stage))
            except EmptyInput:
                continue
    return out


_BIAS_HEADER = ("level", "stage", "A", "B", "Tie", "A-B pp", "A/B ratio", "insufficient")


def _bias_rows(reports: Sequence[BiasReport]) -> list[list]:
    rows = []
    for r in reports:
        p = r.percentages
        rows.append(
            [
                r.level.value,
                r.stage.value if r.stage else "",
                f"{p['A']:.1f}",
                f"{p['B']:.1f}",
                f"{p['Tie']:.1f}",
                f"{r.skew_pp:+.1f}",
                "n/a" if r.ab_ratio is None else f"{r.ab_ratio:.2f}",
                r.insufficient,
            ]
        )
    return rows


def format_bias_table(reports: Sequence[BiasReport]) -> str:
    rows = [list(_BIAS_HEADER)] + [[str(c) for c in row] for row in _bias_rows(reports)]
    widths = [max(len(row[i]) for row in rows) for i in range(len(_BIAS_HEADER))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows)


def plot_bias(reports: Sequence[BiasReport], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    labels = [f"{r.level.value}\n{r.stage.value if r.stage else ''}" for r in reports]
    bottom = [0.0] * len(reports)
    for bucket, color in (("A", "#4c72b0"), ("B", "#dd8452"), ("Tie", "#a5a5a5")):
        vals = [r.percentages[bucket] for r in reports]
        ax.bar(labels, vals, bottom=bottom, label=bucket, color=color)
        bottom = [b + v for b, v in zip(bottom, vals)]
    ax.set_ylabel("% of verdicts")
    ax.set_ylim(0, 100)
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title("Verdict distribution before and after swap filtering")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_bias_outputs(results: Sequence[PipelineResult], out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = bias_reports(results)
    shrink = pool_shrink(r.evidence for r in results if r.evidence is not None and r.evidence.scf_applied)
    paths = {
        "bias_json": _write_json(
            out_dir / "bias.json",
            {"reports": [r.to_dict() for r in reports], "pool": shrink.to_dict()},
        ),
        "bias_tsv": _write_tsv(out_dir / "bias.tsv", _BIAS_HEADER, _bias_rows(reports)),
    }
    text = format_bias_table(reports)
    (out_dir / "bias.txt").write_text(text + "\n", encoding="utf-8")
    paths["bias_txt"] = out_dir / "bias.txt"
    if reports:
        paths["bias_png"] = plot_bias(reports, out_dir / "bias.png")
    return paths


# ---------------------------------------------------------------------------
# refinement cost


def refinement_summary(results: Sequence[PipelineResult]) -> dict:
    total = CallCounter()
    n_tie = n_sub = n_nonred = n_acc = 0
    for r in results:
        total = total + r.calls
        for rnd in r.refinement_rounds:
            n_tie += rnd["n_tie"]
            n_sub += rnd["n_sub"]
            n_nonred += rnd["n_nonred"]
            n_acc += rnd["n_accepted"]
    plain = total.plain_loop_equivalent
    batched = total.batched_total
    return {
        "n_tie": n_tie,
        "n_sub": n_sub,
        "n_nonred": n_nonred,
        "n_accepted": n_acc,
        "batched_calls": batched,
        "plain_loop_calls": plain,
        "calls_saved": plain - batched,
        "saved_pct": round(100.0 * (plain - batched) / plain, 2) if plain else 0.0,
        "counter": total.to_dict(),
    }


def plot_refinement(summary: dict, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar(["per-criterion loop", "batched"], [summary["plain_loop_calls"], summary["batched_calls"]],
           color=["#a5a5a5", "#4c72b0"])
    ax.set_ylabel("decomposition + filter calls")
    ax.set_title(f"Refinement calls (saved {summary['saved_pct']:.1f}%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# accuracy


def plot_confusion(metrics: MetricsReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(3.8, 3.4))
    ax.imshow(metrics.confusion, cmap="Blues")
    names = [l.value for l in LABELS]
    ax.set_xticks(range(3), names)
    ax.set_yticks(range(3), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("human")
    for i, row in enumerate(metrics.confusion):
        for j, v in enumerate(row):
            ax.text(j, i, str(v), ha="center", va="center")
    ax.set_title(f"{metrics.method or 'run'}: acc {100 * metrics.overall_accuracy:.1f}%")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_metrics_outputs(metrics: MetricsReport, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [l.value for l in LABELS]
    return {
        "metrics_json": _write_json(out_dir / "metrics.json", metrics.to_dict()),
        "per_category_tsv": _write_tsv(
            out_dir / "per_category.tsv",
            ("category", "accuracy"),
            [(c, f"{a:.4f}") for c, a in metrics.per_category.items()],
        ),
        "confusion_tsv": _write_tsv(
            out_dir / "confusion.tsv",
            ["human\\predicted"] + names,
            [[n] + row for n, row in zip(names, metrics.confusion)],
        ),
        "confusion_png": plot_confusion(metrics, out_dir / "confusion.png"),
    }


def write_comparison(rows: Sequence[MetricsReport], out_dir: str | Path) -> dict[str, Path]:
    """One row per method: overall accuracy and failure count."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tsv = _write_tsv(
        out_dir / "comparison.tsv",
        ("method", "n", "accuracy", "failed"),
        [(m.method, m.n, f"{100 * m.overall_accuracy:.1f}", len(m.failed)) for m in rows],
    )
    js = _write_json(out_dir / "comparison.json", [m.to_dict() for m in rows])
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(rows) + 2), 3.4))
    ax.bar([m.method for m in rows], [100 * m.overall_accuracy for m in rows], color="#4c72b0")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right", fontsize=8)
    fig.tight_layout()
    png = out_dir / "comparison.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    return {"comparison_tsv": tsv, "comparison_json": js, "comparison_png": png}


def write_report(
    results: Sequence[PipelineResult], metrics: MetricsReport | None, out_dir: str | Path
) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    if metrics is not None:
        paths.update(write_metrics_outputs(metrics, out_dir))
    paths.update(write_bias_outputs(results, out_dir))
    summary = refinement_summary(results)
    paths["refinement_json"] = _write_json(out_dir / "refinement.json", summary)
    if summary["plain_loop_calls"]:
        paths["refinement_png"] = plot_refinement(summary, out_dir / "refinement.png")
    return paths
