"""Command-line entry point: ``pairjudge <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .config import PRESETS, RunConfig
from .core import PairJudgeError, Stage
from .guidance import GuidanceArtifact, prepare_record, synthesize_guidance
from .harness import (
    SplitManifest,
    accuracy,
    ingest,
    make_backend,
    make_context,
    open_gateway,
    predictions_of,
    read_results,
    run_pipeline,
    split,
)
from .prompts import compose_guidance
from .report import (
    bias_reports,
    format_bias_table,
    write_bias_outputs,
    write_comparison,
    write_metrics_outputs,
    write_report,
)

logger = logging.getLogger("pairjudge")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    preset = getattr(args, "preset", None)
    if preset:
        cfg = replace(cfg, pipeline=PRESETS[preset])
    workers = getattr(args, "workers", None)
    if workers:
        cfg = replace(cfg, harness=replace(cfg.harness, workers=workers))
    guidance = getattr(args, "guidance", None)
    if guidance:
        cfg = replace(cfg, guidance_path=guidance)
    return cfg


def _load_artifact(cfg: RunConfig) -> GuidanceArtifact | None:
    if not cfg.pipeline.uses_guidance:
        return None
    if not cfg.guidance_path:
        raise PairJudgeError("this configuration needs a guidance artifact (--guidance)")
    return GuidanceArtifact.load(cfg.guidance_path)


def _val_ids(args, dataset) -> list[str]:
    manifest = SplitManifest.load(args.split)
    if manifest.dataset_hash and manifest.dataset_hash != dataset.content_hash:
        raise PairJudgeError("split manifest was made for a different dataset file")
    ids = sorted(manifest.val_ids)
    if getattr(args, "limit", None):
        ids = ids[: args.limit]
    return ids


def cmd_ingest_check(args) -> int:
    ds = ingest(args.data, strict=not args.lenient)
    cats: dict[str, int] = {}
    votes: dict[str, int] = {}
    missing_shots = 0
    for inst in ds.instances:
        cats[inst.category.value] = cats.get(inst.category.value, 0) + 1
        key = inst.human_overall.value if inst.human_overall else "unlabeled"
        votes[key] = votes.get(key, 0) + 1
        for ref in inst.evidence.screenshot_refs_a + inst.evidence.screenshot_refs_b:
            if not ref.startswith(("http://", "https://", "data:")) and not Path(ref).is_file():
                missing_shots += 1
    print(json.dumps(
        {"instances": len(ds), "skipped_lines": ds.skipped, "categories": cats,
         "human_votes": votes, "missing_screenshots": missing_shots,
         "dataset_hash": ds.content_hash},
        indent=2, sort_keys=True,
    ))
    return 0


def cmd_split(args) -> int:
    ds = ingest(args.data)
    manifest = split(ds, args.seed, args.fraction)
    manifest.save(args.out)
    print(f"train={len(manifest.train_ids)}\tval={len(manifest.val_ids)}\t-> {args.out}")
    return 0


def cmd_synthesize(args) -> int:
    cfg = _load_config(args)
    ds = ingest(args.data)
    manifest = SplitManifest.load(args.split)
    by_id = ds.by_id()
    train = [by_id[i] for i in sorted(manifest.train_ids) if by_id[i].human_overall is not None]
    gw = open_gateway(make_backend(args.backend, cfg.gateway, seed=args.mock_seed), args.run_dir,
                      max_attempts=cfg.gateway.max_attempts)
    ctx = make_context(gw, cfg)
    no_guidance = compose_guidance(None, train[0].category, Stage.FINAL_JUDGING) if train else ("", "")
    with ThreadPoolExecutor(max_workers=cfg.harness.workers) as pool:
        records = list(pool.map(lambda i: prepare_record(ctx.for_instance(), i, no_guidance), train))
    artifact = synthesize_guidance(
        ctx, records, manifest.train_ids, synthesizer=args.synthesizer,
        token_budget=args.budget, seed=args.seed,
    )
    artifact.save(args.out)
    print(f"records={artifact.provenance.record_count}\tcontent_hash={artifact.content_hash[:16]}\t-> {args.out}")
    return 0


def cmd_judge(args) -> int:
    cfg = _load_config(args)
    ds = ingest(args.data)
    ids = _val_ids(args, ds)
    artifact = _load_artifact(cfg)
    backend = make_backend(args.backend, cfg.gateway, seed=args.mock_seed)
    gw = open_gateway(backend, args.run_dir, max_attempts=cfg.gateway.max_attempts)
    results = run_pipeline(ds, ids, cfg, gw, artifact=artifact, run_dir=args.run_dir)
    metrics = accuracy(
        predictions_of(results), ids, ds, method=args.preset or "config",
        exclude_failed=cfg.harness.failure_policy == "exclude",
    )
    write_metrics_outputs(metrics, args.run_dir)
    failed = sum(r.status != "ok" for r in results)
    print(f"instances={len(results)}\tfailed={failed}\taccuracy={100 * metrics.overall_accuracy:.1f}"
          f"\tnetwork_calls={gw.stats.network_calls}\tcache_hits={gw.stats.cache_hits}")
    return 0


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    ds = ingest(args.data)
    ids = _val_ids(args, ds)
    out = Path(args.out)
    gw = open_gateway(make_backend(args.backend, cfg.gateway, seed=args.mock_seed), out,
                      max_attempts=cfg.gateway.max_attempts)
    rows = []
    for name in args.presets.split(","):
        if name not in PRESETS:
            raise PairJudgeError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        run_cfg = replace(cfg, pipeline=PRESETS[name])
        results = run_pipeline(ds, ids, run_cfg, gw, artifact=_load_artifact(run_cfg),
                               run_dir=out / name.replace(":", "_"))
        rows.append(accuracy(predictions_of(results), ids, ds, method=name))
    write_comparison(rows, out)
    for m in rows:
        print(f"{m.method}\t{100 * m.overall_accuracy:.1f}\tfailed={len(m.failed)}")
    return 0


def cmd_evaluate(args) -> int:
    ds = ingest(args.data)
    ids = _val_ids(args, ds)
    results = [r for r in read_results(args.results) if r.instance_id in set(ids)]
    metrics = accuracy(predictions_of(results), ids, ds, method=args.method,
                       exclude_failed=args.exclude_failed)
    if args.out:
        write_metrics_outputs(metrics, args.out)
    print(json.dumps(metrics.to_dict(), indent=2))
    return 0


def cmd_analyze_bias(args) -> int:
    results = read_results(args.results)
    if args.out:
        write_bias_outputs(results, args.out)
    print(format_bias_table(bias_reports(results)))
    return 0


def cmd_report(args) -> int:
    ds = ingest(args.data)
    ids = _val_ids(args, ds)
    results = [r for r in read_results(args.results) if r.instance_id in set(ids)]
    metrics = accuracy(predictions_of(results), ids, ds, method=args.method)
    paths = write_report(results, metrics, args.out)
    for name, p in sorted(paths.items()):
        print(f"{name}\t{p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pairjudge", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, data=True, split_arg=False, backend=False):
        if data:
            sp.add_argument("--data", required=True, help="JSONL dataset")
        if split_arg:
            sp.add_argument("--split", required=True, help="split manifest JSON")
        if backend:
            sp.add_argument("--config", help="TOML run configuration")
            sp.add_argument("--backend", choices=("mock", "http"), default="http")
            sp.add_argument("--mock-seed", type=int, default=0)
            sp.add_argument("--workers", type=int)

    sp = sub.add_parser("ingest-check", help="validate a dataset file")
    common(sp)
    sp.add_argument("--lenient", action="store_true", help="skip bad lines instead of failing")
    sp.set_defaults(func=cmd_ingest_check)

    sp = sub.add_parser("split", help="write a seeded train/validation split")
    common(sp)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--fraction", type=float, default=0.2, help="training share")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("synthesize-guidance", help="build a guidance artifact from the training split")
    common(sp, split_arg=True, backend=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--synthesizer", help="model id for the synthesis call")
    sp.add_argument("--budget", type=int, default=100_000, help="token budget for records")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--run-dir", help="cache and transcript directory")
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("judge", help="run the pipeline over the validation split")
    common(sp, split_arg=True, backend=True)
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.add_argument("--guidance", help="guidance artifact JSON")
    sp.add_argument("--limit", type=int)
    sp.set_defaults(func=cmd_judge)

    sp = sub.add_parser("compare-baselines", help="run several presets and tabulate accuracy")
    common(sp, split_arg=True, backend=True)
    sp.add_argument("--presets", default="monolithic,pointwise,pairwise,full")
    sp.add_argument("--guidance")
    sp.add_argument("--limit", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("evaluate", help="accuracy of a results file")
    common(sp, split_arg=True)
    sp.add_argument("--results", required=True)
    sp.add_argument("--method", default="")
    sp.add_argument("--limit", type=int, help="score only the first N validation ids")
    sp.add_argument("--exclude-failed", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("analyze-bias", help="A/B/Tie distribution before and after swap filtering")
    sp.add_argument("--results", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_analyze_bias)

    sp = sub.add_parser("report", help="metrics, bias and refinement tables with figures")
    common(sp, split_arg=True)
    sp.add_argument("--results", required=True)
    sp.add_argument("--method", default="")
    sp.add_argument("--limit", type=int, help="score only the first N validation ids")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (PairJudgeError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
