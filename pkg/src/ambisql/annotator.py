"""Training data for the infilling model, supervised by SQL execution.

Default interpretations are parsed to SQL and executed; any gold query whose
denotation none of them reproduces is "missing", and its aligned reference
interpretation becomes a target line.  When nothing is missing the target is
the sentinel sentence.

Reference interpretations themselves can be synthesized from synonym pairs:
rewrite the question with each synonym, then accept the pair only if a
text-to-SQL model recovers each paired gold within a few attempts.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

from .dataset_io import Example, atomic_write_text, dumps_jsonl
from .interpretations import DEFAULT, number
from .llm.gateway import Gateway, GenerationError
from .llm.parsing import SQLExtractionError, extract_sql, strip_marker
from .llm.prompts import INFILL, SENTINEL, SYNONYM_REWRITE, TEXT2SQL, render_prompt
from .matcher import GoldExecutionError, dedup_by_denotation, execute_gold, match_predictions
from .pipeline import PipelineConfig, parse_all_to_sql, run_default_interps
from .sandbox import DatabaseBuildError, Sandbox

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 5
RETRY_TEMPERATURE = 0.7


@dataclass
class InfillTrainingRecord:
    db_dump: str
    question: str
    default_interpretations: list[str]
    target: str
    # Audit fields, not part of the training file.
    example_id: str = ""
    default_sql: list[str] = field(default_factory=list)
    missing_gold_indices: list[int] = field(default_factory=list)

    @property
    def is_sentinel(self) -> bool:
        return self.target == SENTINEL

    def to_training_dict(self) -> dict:
        return {
            "db_dump": self.db_dump,
            "question": self.question,
            "default_interpretations": list(self.default_interpretations),
            "target": self.target,
        }

    def to_dict(self) -> dict:
        return asdict(self)


def format_instruction(record: InfillTrainingRecord) -> dict:
    """Wrap a record in the infilling instruction for instruction-tuning toolkits."""
    prompt = render_prompt(
        INFILL,
        {"db_dump": record.db_dump, "question": record.question, "interpretations": record.default_interpretations},
    )
    return {"instruction": prompt, "output": record.target}


def target_for(example: Example, missing: Sequence[int]) -> str:
    if not missing:
        return SENTINEL
    return "\n".join(example.gold_interpretations[i] for i in sorted(missing))


def build_infill_record(
    example: Example, cfg: PipelineConfig, defaults: Sequence[str] | None = None
) -> InfillTrainingRecord:
    """Build one training record; pass ``defaults`` to skip default generation."""
    if not example.gold_interpretations or len(example.gold_interpretations) != len(example.gold_sql):
        raise ValueError(f"{example.example_id}: gold interpretations must align with gold SQL")
    sandbox = cfg.sandbox
    with sandbox.build(example.db) as handle:
        golds = execute_gold(example, sandbox, handle)
        if defaults is None:
            interps = run_default_interps(example, cfg)
        else:
            interps = number(defaults, DEFAULT)
        parsed = parse_all_to_sql(example, interps, cfg, handle)
        report = match_predictions(example, parsed, sandbox, handle, gold_denotations=golds)
    # Train on the same deduplicated defaults the infiller sees at inference time.
    kept = dedup_by_denotation(parsed, sandbox.mode)
    return InfillTrainingRecord(
        db_dump=example.db.dump_text,
        question=example.question,
        default_interpretations=[p.interpretation.text for p in kept],
        target=target_for(example, report.missing_gold_indices),
        example_id=example.example_id,
        default_sql=[p.sql for p in kept],
        missing_gold_indices=sorted(report.missing_gold_indices),
    )


_SKIPPABLE = (GoldExecutionError, DatabaseBuildError, GenerationError, ValueError)


def build_infill_dataset(
    examples: Sequence[Example],
    cfg: PipelineConfig,
    out_path: str | os.PathLike,
    *,
    width: int = 1,
    instruction_format: bool = False,
) -> dict:
    """Write one training record per usable example; returns counts.

    The file is written atomically, so a failure leaves no partial output.
    """

    def one(example: Example):
        try:
            return build_infill_record(example, cfg)
        except _SKIPPABLE as exc:
            logger.warning("skipping %s: %s", example.example_id, exc)
            return None

    if width > 1:
        with ThreadPoolExecutor(max_workers=width) as pool:
            results = list(pool.map(one, examples))
    else:
        results = [one(e) for e in examples]
    records = [r for r in results if r is not None]
    lines = (format_instruction(r) if instruction_format else r.to_training_dict() for r in records)
    atomic_write_text(out_path, dumps_jsonl(lines))
    return {
        "total": len(records),
        "sentinel_count": sum(1 for r in records if r.is_sentinel),
        "skipped": len(results) - len(records),
    }


# ---------------------------------------------------------------------------
# Synonym-based synthesis


@dataclass
class SynthesisRecord:
    example_id: str
    source_question: str
    synonym: str
    gold_index: int
    rewritten_question: str | None
    attempts_used: int
    accepted: bool
    # Whether this rewrite alone validated; ``accepted`` needs both.
    validated: bool = False
    validating_sql: str | None = None
    failures: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _first_line(text: str) -> str:
    for line in (text or "").splitlines():
        cleaned = strip_marker(line).strip().strip('"').strip()
        if cleaned:
            return cleaned
    return ""


def _synthesize_one(
    example: Example,
    index: int,
    synonym: str,
    rewrite: Gateway,
    validator: Gateway,
    sandbox: Sandbox,
    handle,
    gold,
    max_attempts: int,
    retry_temperature: float,
) -> SynthesisRecord:
    record = SynthesisRecord(
        example_id=example.example_id,
        source_question=example.question,
        synonym=synonym,
        gold_index=index,
        rewritten_question=None,
        attempts_used=0,
        accepted=False,
    )
    try:
        reply = rewrite.complete(render_prompt(SYNONYM_REWRITE, {"question": example.question, "synonym": synonym}))
    except GenerationError as exc:
        record.failures.append(f"rewrite: {exc}")
        return record
    rewritten = _first_line(reply)
    if not rewritten:
        record.failures.append("rewrite: empty reply")
        return record
    record.rewritten_question = rewritten
    prompt = render_prompt(TEXT2SQL, {"db_dump": example.db.dump_text, "question": rewritten})
    for attempt in range(1, max_attempts + 1):
        record.attempts_used = attempt
        # Distinct seeds keep every attempt a separate cache entry.
        temperature = None if attempt == 1 else retry_temperature
        try:
            sql = extract_sql(validator.complete(prompt, seed=attempt - 1, temperature=temperature))
        except (GenerationError, SQLExtractionError) as exc:
            record.failures.append(f"attempt {attempt}: {exc}")
            continue
        outcome = sandbox.execute(handle, sql)
        if outcome.ok and sandbox.equal(outcome.denotation, gold):
            record.validated = True
            record.validating_sql = sql
            return record
        reason = outcome.message if not outcome.ok else "denotation differs from gold"
        record.failures.append(f"attempt {attempt}: {reason}")
    return record


def synthesize_interpretations(
    example: Example,
    synonyms: Sequence[str],
    rewrite: Gateway,
    validator: Gateway,
    sandbox: Sandbox,
    *,
    max_attempts: int = MAX_ATTEMPTS,
    retry_temperature: float = RETRY_TEMPERATURE,
) -> tuple[SynthesisRecord, SynthesisRecord]:
    """Rewrite the question with each synonym and validate each rewrite by execution.

    ``synonyms[i]`` pairs with ``example.gold_sql[i]``.  The example is
    accepted only when both rewrites validate.
    """
    if len(synonyms) != 2 or len(example.gold_sql) != 2:
        raise ValueError(f"{example.example_id}: synthesis needs two synonyms and two gold queries")
    with sandbox.build(example.db) as handle:
        golds = execute_gold(example, sandbox, handle)
        records = [
            _synthesize_one(example, i, synonyms[i], rewrite, validator, sandbox, handle, golds[i], max_attempts, retry_temperature)
            for i in range(2)
        ]
    accepted = all(r.validated for r in records)
    for r in records:
        r.accepted = accepted
    return records[0], records[1]


def synthesize_dataset(
    examples: Sequence[Example],
    rewrite: Gateway,
    validator: Gateway,
    sandbox: Sandbox,
    *,
    max_attempts: int = MAX_ATTEMPTS,
) -> tuple[list[SynthesisRecord], list[Example]]:
    """Synthesize reference interpretations for every example carrying a synonym pair.

    Returns all records (rejected ones included) and the accepted examples
    with ``gold_interpretations`` filled in.
    """
    records: list[SynthesisRecord] = []
    accepted: list[Example] = []
    for example in examples:
        if not example.synonyms or len(example.synonyms) != 2 or len(example.gold_sql) != 2:
            logger.warning("skipping %s: needs a synonym pair and two gold queries", example.example_id)
            continue
        try:
            pair = synthesize_interpretations(example, example.synonyms, rewrite, validator, sandbox, max_attempts=max_attempts)
        except (GoldExecutionError, DatabaseBuildError) as exc:
            logger.warning("skipping %s: %s", example.example_id, exc)
            continue
        records.extend(pair)
        if pair[0].accepted:
            accepted.append(replace(example, gold_interpretations=[pair[0].rewritten_question, pair[1].rewritten_question]))
    return records, accepted
