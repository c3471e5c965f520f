"""Disambiguate first, parse later.

For one example the main path is::

    default interpretations -> SQL -> dedup by denotation
        -> infill missing interpretations -> SQL -> merge -> final dedup

Baselines (end-to-end prompting, self-correction, gold interpretations) reuse
the same building blocks so that every method is scored identically.
"""
from __future__ import annotations

import hashlib
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

from . import interpretations as prov
from .dataset_io import Example
from .interpretations import Interpretation
from .llm.gateway import Gateway, GenerationError
from .llm.parsing import SQLExtractionError, extract_sql, parse_interpretations, split_sql_statements
from .llm.prompts import (
    DEFAULT_INTERP,
    END_TO_END,
    INFILL,
    SELF_CORRECT,
    TEXT2SQL,
    TemplateError,
    render_prompt,
)
from .matcher import PredictedItem, dedup_by_denotation
from .sandbox import DatabaseBuildError, DatabaseHandle, ExecOutcome, Sandbox

logger = logging.getLogger(__name__)

# A parsed query is a prediction tied to the interpretation it was generated from.
ParsedQuery = PredictedItem

OURS = "ours"
INTERP_PROMPT = "interp_prompt"
SELF_CORRECT_METHOD = "self_correct"
E2E_0SHOT = "e2e_0shot"
E2E_3SHOT = "e2e_3shot"
GOLD_INTERPS = "gold_interps"
METHODS = (OURS, INTERP_PROMPT, SELF_CORRECT_METHOD, E2E_0SHOT, E2E_3SHOT, GOLD_INTERPS)

DEFAULT_MAX_INTERPRETATIONS = 10


@dataclass
class PipelineConfig:
    text2sql: Gateway | None = None
    interp: Gateway | None = None
    infill: Gateway | None = None
    self_correct: Gateway | None = None
    end_to_end: Gateway | None = None
    sandbox: Sandbox = field(default_factory=Sandbox)
    use_infill: bool = True
    max_interpretations: int = DEFAULT_MAX_INTERPRETATIONS
    demo_pool: list[Example] = field(default_factory=list)
    seed: int = 0

    def gateway(self, stage: str) -> Gateway:
        fallback = {"self_correct": "interp", "end_to_end": "text2sql"}
        gw = getattr(self, stage)
        if gw is None and stage in fallback:
            gw = getattr(self, fallback[stage])
        if gw is None:
            raise ValueError(f"no backend configured for stage {stage!r}")
        return gw


@dataclass
class InfillResult:
    added: list[Interpretation]
    covered: bool


@dataclass
class PipelineResult:
    example_id: str
    method: str = OURS
    interpretations: list[Interpretation] = field(default_factory=list)
    parsed: list[ParsedQuery] = field(default_factory=list)
    final_queries: list[ParsedQuery] = field(default_factory=list)
    infiller_said_covered: bool = False
    trace: list[dict] = field(default_factory=list)
    error: dict | None = None

    def to_dict(self) -> dict:
        return {
            "example_id": self.example_id,
            "method": self.method,
            "interpretations": [i.to_dict() for i in self.interpretations],
            "parsed": [p.to_dict() for p in self.parsed],
            "final_queries": [p.to_dict() for p in self.final_queries],
            "infiller_said_covered": self.infiller_said_covered,
            "trace": self.trace,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineResult":
        return cls(
            example_id=data["example_id"],
            method=data.get("method", OURS),
            interpretations=[Interpretation.from_dict(i) for i in data["interpretations"]],
            parsed=[PredictedItem.from_dict(p) for p in data["parsed"]],
            final_queries=[PredictedItem.from_dict(p) for p in data["final_queries"]],
            infiller_said_covered=data.get("infiller_said_covered", False),
            trace=list(data.get("trace", [])),
            error=data.get("error"),
        )


def _prompt_id(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


def _record(trace: list | None, stage: str, prompt: str, reply: str, **extra) -> None:
    if trace is not None:
        trace.append({"stage": stage, "prompt_sha256": _prompt_id(prompt), "reply": reply, **extra})


def _texts(interps: Sequence[Interpretation]) -> list[str]:
    return [i.text for i in interps]


def run_default_interps(example: Example, cfg: PipelineConfig, trace: list | None = None) -> list[Interpretation]:
    prompt = render_prompt(DEFAULT_INTERP, {"db_dump": example.db.dump_text, "question": example.question})
    reply = cfg.gateway("interp").complete(prompt)
    parsed = parse_interpretations(reply)
    texts = parsed.interps
    if not texts:
        logger.warning("%s: no default interpretations parsed (sentinel=%s)", example.example_id, parsed.all_covered)
    if len(texts) > cfg.max_interpretations:
        logger.warning("%s: capping %d default interpretations at %d", example.example_id, len(texts), cfg.max_interpretations)
        texts = texts[: cfg.max_interpretations]
    interps = prov.number(texts, prov.DEFAULT)
    _record(trace, "default_interps", prompt, reply, interpretations=texts)
    return interps


def run_infill(
    example: Example,
    defaults: Sequence[Interpretation],
    cfg: PipelineConfig,
    trace: list | None = None,
    *,
    start_ordinal: int | None = None,
    room: int | None = None,
) -> InfillResult:
    """Ask the infilling model for readings missing from ``defaults``.

    Only ever adds interpretations; the defaults are passed through untouched.
    """
    prompt = render_prompt(
        INFILL,
        {"db_dump": example.db.dump_text, "question": example.question, "interpretations": _texts(defaults)},
    )
    reply = cfg.gateway("infill").complete(prompt)
    parsed = parse_interpretations(reply)
    existing = set(_texts(defaults))
    fresh = []
    for text in parsed.interps:
        if text not in existing:
            existing.add(text)
            fresh.append(text)
    if room is None:
        room = max(0, cfg.max_interpretations - len(defaults))
    if len(fresh) > room:
        logger.warning("%s: capping infilled interpretations at %d", example.example_id, room)
        fresh = fresh[:room]
    if start_ordinal is None:
        start_ordinal = max((i.ordinal for i in defaults), default=-1) + 1
    added = prov.number(fresh, prov.INFILLED, start=start_ordinal)
    covered = parsed.all_covered and not added
    _record(trace, "infill", prompt, reply, interpretations=fresh, covered=covered)
    return InfillResult(added=added, covered=covered)


def _failed_extraction(reply: str, exc: Exception, interp: Interpretation | None) -> ParsedQuery:
    sql = reply.strip() or "<empty reply>"
    return ParsedQuery(sql=sql, outcome=ExecOutcome.syntax_error(str(exc)), interpretation=interp, raw_output=reply)


def parse_all_to_sql(
    example: Example,
    interps: Sequence[Interpretation],
    cfg: PipelineConfig,
    handle: DatabaseHandle | None = None,
    trace: list | None = None,
) -> list[ParsedQuery]:
    """One text-to-SQL call per interpretation; each query is executed.

    Extraction and execution failures are recorded on the item and do not
    affect the others.
    """
    own = handle is None
    if own:
        handle = cfg.sandbox.build(example.db)
    gateway = cfg.gateway("text2sql")
    out = []
    try:
        for interp in interps:
            prompt = render_prompt(TEXT2SQL, {"db_dump": example.db.dump_text, "question": interp.text})
            reply = gateway.complete(prompt)
            try:
                sql = extract_sql(reply)
            except SQLExtractionError as exc:
                item = _failed_extraction(reply, exc, interp)
            else:
                item = ParsedQuery(
                    sql=sql,
                    outcome=cfg.sandbox.execute(handle, sql),
                    interpretation=interp,
                    raw_output=reply if reply != sql else None,
                )
            _record(trace, "text2sql", prompt, reply, ordinal=interp.ordinal, outcome=item.outcome.kind)
            out.append(item)
    finally:
        if own:
            handle.close()
    return out


def final_dedup(parsed: Sequence[ParsedQuery], cfg: PipelineConfig) -> list[ParsedQuery]:
    return [p for p in dedup_by_denotation(parsed, cfg.sandbox.mode) if p.ok]


def disambiguate_then_parse(example: Example, cfg: PipelineConfig) -> PipelineResult:
    trace: list = []
    with cfg.sandbox.build(example.db) as handle:
        defaults = run_default_interps(example, cfg, trace)
        parsed_defaults = parse_all_to_sql(example, defaults, cfg, handle, trace)
        # The infiller sees one representative per distinct denotation.
        kept = dedup_by_denotation(parsed_defaults, cfg.sandbox.mode)
        infill_input = [p.interpretation for p in kept]
        trace.append({"stage": "dedup_defaults", "kept_ordinals": [i.ordinal for i in infill_input]})
        added: list[Interpretation] = []
        covered = False
        if cfg.use_infill:
            result = run_infill(
                example,
                infill_input,
                cfg,
                trace,
                start_ordinal=len(defaults),
                room=max(0, cfg.max_interpretations - len(defaults)),
            )
            added, covered = result.added, result.covered
        parsed_added = parse_all_to_sql(example, added, cfg, handle, trace)
    parsed = parsed_defaults + parsed_added
    final = final_dedup(parsed, cfg)
    trace.append({"stage": "final_dedup", "final_count": len(final)})
    return PipelineResult(
        example_id=example.example_id,
        method=OURS if cfg.use_infill else INTERP_PROMPT,
        interpretations=list(defaults) + list(added),
        parsed=parsed,
        final_queries=final,
        infiller_said_covered=covered,
        trace=trace,
    )


def sample_demonstrations(example: Example, shots: int, cfg: PipelineConfig) -> list[dict]:
    """Draw ``shots`` other examples from the pool, seeded per example id."""
    if shots == 0:
        return []
    pool = [e for e in cfg.demo_pool if e.example_id != example.example_id]
    if len(pool) < shots:
        raise ValueError(f"demonstration pool has {len(pool)} candidates, {shots} requested")
    rng = random.Random(f"{cfg.seed}:{example.example_id}")
    chosen = rng.sample(pool, shots)
    return [{"db_dump": e.db.dump_text, "question": e.question, "queries": e.gold_sql} for e in chosen]


def end_to_end_baseline(example: Example, shots: int, cfg: PipelineConfig, trace: list | None = None) -> list[ParsedQuery]:
    demos = sample_demonstrations(example, shots, cfg)
    prompt = render_prompt(
        END_TO_END, {"db_dump": example.db.dump_text, "question": example.question, "demonstrations": demos}
    )
    reply = cfg.gateway("end_to_end").complete(prompt)
    statements = split_sql_statements(reply)
    _record(trace, "end_to_end", prompt, reply, shots=shots, statements=len(statements))
    if not statements:
        return [_failed_extraction(reply, SQLExtractionError("no SQL found in end-to-end output"), None)]
    with cfg.sandbox.build(example.db) as handle:
        return [ParsedQuery(sql=sql, outcome=cfg.sandbox.execute(handle, sql)) for sql in statements]


def self_correct(
    example: Example, interps: Sequence[Interpretation], cfg: PipelineConfig, trace: list | None = None
) -> list[Interpretation]:
    """Let the model review candidates; its answer replaces the candidate set."""
    if not interps:
        raise ValueError(f"{example.example_id}: self-correction needs at least one candidate")
    prompt = render_prompt(
        SELF_CORRECT,
        {"db_dump": example.db.dump_text, "question": example.question, "interpretations": _texts(interps)},
    )
    reply = cfg.gateway("self_correct").complete(prompt)
    texts = parse_interpretations(reply).interps[: cfg.max_interpretations]
    if not texts:
        logger.warning("%s: self-correction removed every interpretation", example.example_id)
    _record(trace, "self_correct", prompt, reply, interpretations=texts)
    return prov.number(texts, prov.SELF_CORRECTED)


def _interpretations_then_parse(example: Example, cfg: PipelineConfig, method: str) -> PipelineResult:
    trace: list = []
    if method == GOLD_INTERPS:
        if not example.gold_interpretations:
            raise ValueError(f"{example.example_id}: no gold interpretations available")
        interps = prov.number(list(example.gold_interpretations), prov.GOLD_REFERENCE)
    else:
        candidates = run_default_interps(example, cfg, trace)
        interps = self_correct(example, candidates, cfg, trace) if candidates else []
    parsed = parse_all_to_sql(example, interps, cfg, trace=trace)
    return PipelineResult(
        example_id=example.example_id,
        method=method,
        interpretations=interps,
        parsed=parsed,
        final_queries=final_dedup(parsed, cfg),
        trace=trace,
    )


def run_method(example: Example, cfg: PipelineConfig, method: str = OURS) -> PipelineResult:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method in (OURS, INTERP_PROMPT):
        use_infill = method == OURS
        if cfg.use_infill != use_infill:
            cfg = replace(cfg, use_infill=use_infill)
        return disambiguate_then_parse(example, cfg)
    if method in (E2E_0SHOT, E2E_3SHOT):
        trace: list = []
        parsed = end_to_end_baseline(example, 0 if method == E2E_0SHOT else 3, cfg, trace)
        return PipelineResult(
            example_id=example.example_id,
            method=method,
            parsed=parsed,
            final_queries=final_dedup(parsed, cfg),
            trace=trace,
        )
    return _interpretations_then_parse(example, cfg, method)


HARD_ERRORS = (GenerationError, DatabaseBuildError, TemplateError, ValueError)


def run_batch(examples: Sequence[Example], cfg: PipelineConfig, method: str = OURS, width: int = 1) -> list[PipelineResult]:
    """Run ``method`` over all examples; a failing example yields an error entry."""

    def one(example: Example) -> PipelineResult:
        try:
            return run_method(example, cfg, method)
        except HARD_ERRORS as exc:
            logger.error("%s: %s failed: %s", example.example_id, method, exc)
            return PipelineResult(
                example_id=example.example_id,
                method=method,
                error={"type": type(exc).__name__, "message": str(exc)},
            )

    if width <= 1:
        return [one(e) for e in examples]
    with ThreadPoolExecutor(max_workers=width) as pool:
        return list(pool.map(one, examples))
