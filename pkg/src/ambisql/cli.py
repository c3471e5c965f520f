"""Command-line entry points: eval, run, annotate-infill, synthesize, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .annotator import build_infill_dataset, synthesize_dataset
from .config import ConfigError, RunConfig
from .dataset_io import DatasetError, Example, atomic_write_text, dumps_jsonl, filter_nonempty, load_dataset, write_canonical
from .llm.gateway import GenerationError
from .matcher import GoldExecutionError, MatchReport, match_predictions
from .metrics import aggregate, score_example, score_unambiguous
from .pipeline import (
    E2E_0SHOT,
    E2E_3SHOT,
    GOLD_INTERPS,
    INTERP_PROMPT,
    METHODS,
    OURS,
    SELF_CORRECT_METHOD,
    run_batch,
    run_method,
)
from .sandbox import COMPARISON_MODES, DatabaseBuildError, DatabaseSpec

logger = logging.getLogger("ambisql")

METHOD_STAGES = {
    OURS: ("interp", "infill", "text2sql"),
    INTERP_PROMPT: ("interp", "text2sql"),
    SELF_CORRECT_METHOD: ("interp", "self_correct", "text2sql"),
    E2E_0SHOT: ("end_to_end",),
    E2E_3SHOT: ("end_to_end",),
    GOLD_INTERPS: ("text2sql",),
}

PIPELINE_RESULTS = "pipeline_results.jsonl"
MATCH_REPORTS = "match_reports.jsonl"
METRICS_JSON = "metrics.json"
METRICS_TEXT = "metrics.txt"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "comparison", None):
        config.comparison = args.comparison
    if getattr(args, "out", None):
        config.output_dir = args.out
    return config


def _load_examples(config: RunConfig) -> list[Example]:
    if not config.dataset_path:
        raise ConfigError("config has no dataset.path")
    examples = load_dataset(config.dataset_path, config.dataset_format)
    if config.filter_nonempty:
        before = len(examples)
        examples = filter_nonempty(examples, config.sandbox())
        logger.info("filter_nonempty kept %d of %d examples", len(examples), before)
    return examples


def _score_reports(reports: list[MatchReport], ambiguity: dict[str, bool | None]) -> dict:
    scores = [score_example(r) for r in reports]
    summary = aggregate(scores)
    unambiguous = [r for r in reports if ambiguity.get(r.example_id) is False and r.n_golds == 1]
    found = [score_unambiguous(r)["found"] for r in unambiguous]
    return {
        "summary": summary,
        "scores": scores,
        "unambiguous": {"n": len(found), "found": 100.0 * sum(found) / len(found) if found else None},
    }


def cmd_eval(args) -> int:
    config = _load_config(args)
    method = args.method
    if args.no_infill and method == OURS:
        method = INTERP_PROMPT
    examples = _load_examples(config)
    if not examples:
        raise DatasetError("dataset is empty")
    cfg = config.pipeline_config(METHOD_STAGES[method], demo_pool=examples if method == E2E_3SHOT else [])
    results = run_batch(examples, cfg, method, width=config.concurrency)

    sandbox = config.sandbox()
    reports = []
    for example, result in zip(examples, results):
        try:
            reports.append(match_predictions(example, result.parsed, sandbox))
        except (GoldExecutionError, DatabaseBuildError) as exc:
            logger.error("%s: cannot score: %s", example.example_id, exc)
            result.error = result.error or {"type": type(exc).__name__, "message": str(exc)}
    scored = _score_reports(reports, {e.example_id: e.is_ambiguous for e in examples})
    summary = scored["summary"]

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / PIPELINE_RESULTS, dumps_jsonl(r.to_dict() for r in results))
    atomic_write_text(out / MATCH_REPORTS, dumps_jsonl(r.to_dict() for r in reports))
    metrics = {
        "method": method,
        "n_pipeline_errors": sum(1 for r in results if r.error),
        "summary": summary.to_dict(),
        "unambiguous": scored["unambiguous"],
        "scores": [s.to_dict() for s in scored["scores"]],
    }
    atomic_write_text(out / METRICS_JSON, json.dumps(metrics, indent=2) + "\n")
    table = summary.to_text(title=method)
    atomic_write_text(out / METRICS_TEXT, table)
    print(table, end="")
    return EXIT_OK


def _preview(outcome, limit: int = 5) -> str:
    if outcome is None:
        return "(not executed)"
    if not outcome.ok:
        return f"[{outcome.kind}] {outcome.message}"
    den = outcome.denotation
    lines = [f"{len(den.rows)} row(s){' (truncated)' if den.truncated else ''}"]
    for row in den.rows[:limit]:
        lines.append("  " + " | ".join("NULL" if v is None else str(v) for v in row))
    if len(den.rows) > limit:
        lines.append("  ...")
    return "\n".join(lines)


def cmd_run(args) -> int:
    config = _load_config(args)
    dump_path = Path(args.db_dump)
    try:
        dump = dump_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read database dump: {exc}") from exc
    example = Example(
        example_id="adhoc",
        db=DatabaseSpec(db_id=dump_path.stem, dump_text=dump),
        question=args.question,
        gold_sql=[],
    )
    method = INTERP_PROMPT if args.no_infill else OURS
    cfg = config.pipeline_config(METHOD_STAGES[method])
    result = run_method(example, cfg, method)
    if args.json:
        print(json.dumps(result.to_dict(), ensure_ascii=False))
        return EXIT_OK
    print(f"Question: {args.question}")
    final = {id(p) for p in result.final_queries}
    for item in result.parsed:
        interp = item.interpretation
        tag = "final" if id(item) in final else "duplicate/failed"
        print()
        print(f"[{interp.ordinal + 1}] ({interp.provenance}, {tag}) {interp.text}")
        print(f"SQL: {item.sql}")
        print(_preview(item.outcome))
    if result.infiller_said_covered:
        print("\nInfiller: all interpretations are covered.")
    return EXIT_OK


def cmd_annotate(args) -> int:
    config = _load_config(args)
    examples = _load_examples(config)
    cfg = config.pipeline_config(("interp", "text2sql"))
    out = Path(args.out or Path(config.output_dir) / "infill_train.jsonl")
    if out.suffix != ".jsonl":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "infill_train.jsonl"
    stats = build_infill_dataset(
        examples, cfg, out, width=config.concurrency, instruction_format=args.instruction_format
    )
    print(f"total={stats['total']} sentinel={stats['sentinel_count']} skipped={stats['skipped']}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    config = _load_config(args)
    examples = _load_examples(config)
    config.require(("rewrite", "validator"))
    records, accepted = synthesize_dataset(
        examples, config.gateway("rewrite"), config.gateway("validator"), config.sandbox()
    )
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "synthesis_records.jsonl", dumps_jsonl(r.to_dict() for r in records))
    write_canonical(accepted, out / "synthesized.jsonl")
    print(f"examples={len(records) // 2} accepted={len(accepted)} rejected={len(records) // 2 - len(accepted)}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.reports)
    if path.is_dir():
        path = path / MATCH_REPORTS
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read match reports: {exc}") from exc
    reports = [MatchReport.from_dict(json.loads(line)) for line in lines if line.strip()]
    if not reports:
        raise DatasetError(f"no match reports in {path}")
    summary = aggregate([score_example(r) for r in reports])
    if args.json:
        print(summary.to_json(), end="")
    else:
        print(summary.to_text(title=args.title), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ambisql", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory (overrides config)"):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", help=out_help)
        p.add_argument("--seed", type=int, help="seed for demonstration sampling")
        p.add_argument("--comparison", choices=COMPARISON_MODES, help="denotation comparison mode")

    p = sub.add_parser("eval", help="run a method over a dataset and score it")
    common(p)
    p.add_argument("--method", choices=METHODS, default=OURS)
    p.add_argument("--no-infill", action="store_true", help="skip the infilling stage")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="disambiguate and parse a single question")
    common(p)
    p.add_argument("--question", required=True)
    p.add_argument("--db-dump", required=True, help="SQLite dump file")
    p.add_argument("--json", action="store_true", help="print one JSON object")
    p.add_argument("--no-infill", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("annotate-infill", help="build infilling training data")
    common(p, out_help="output .jsonl file or directory")
    p.add_argument("--instruction-format", action="store_true", help="wrap records in the infilling instruction")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("synthesize", help="synthesize reference interpretations from synonym pairs")
    common(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("report", help="re-render metrics from stored match reports")
    p.add_argument("reports", help="match_reports.jsonl or an eval output directory")
    p.add_argument("--json", action="store_true")
    p.add_argument("--title", default="all")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatabaseBuildError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
