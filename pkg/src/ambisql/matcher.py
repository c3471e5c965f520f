"""Execution-based matching of predicted queries against gold queries."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .dataset_io import Example
from .interpretations import Interpretation
from .sandbox import MULTISET, ORDERED, DatabaseHandle, Denotation, ExecOutcome, Sandbox

logger = logging.getLogger(__name__)


class GoldExecutionError(Exception):
    """A gold query failed to execute; the example itself is defective."""

    def __init__(self, example_id: str, index: int, outcome: ExecOutcome):
        self.example_id = example_id
        self.index = index
        self.outcome = outcome
        super().__init__(f"{example_id}: gold #{index} failed ({outcome.kind}): {outcome.message}")


@dataclass(frozen=True)
class PredictedItem:
    """A predicted SQL query, optionally tied to the interpretation it came from."""

    sql: str
    outcome: ExecOutcome | None = None
    interpretation: Interpretation | None = None
    # Model reply the SQL was extracted from, when it differs from ``sql``.
    raw_output: str | None = None
    unverifiable: bool = False

    def __post_init__(self):
        if not self.sql:
            raise ValueError("predicted sql must be non-empty")

    @property
    def ok(self) -> bool:
        return self.outcome is not None and self.outcome.ok

    def to_dict(self) -> dict:
        out: dict = {
            "interpretation": self.interpretation.to_dict() if self.interpretation else None,
            "sql": self.sql,
            "outcome": self.outcome.to_dict() if self.outcome else None,
        }
        if self.raw_output is not None:
            out["raw_output"] = self.raw_output
        if self.unverifiable:
            out["unverifiable"] = True
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PredictedItem":
        interp = data.get("interpretation")
        outcome = data.get("outcome")
        return cls(
            sql=data["sql"],
            outcome=ExecOutcome.from_dict(outcome) if outcome else None,
            interpretation=Interpretation.from_dict(interp) if interp else None,
            raw_output=data.get("raw_output"),
            unverifiable=data.get("unverifiable", False),
        )


def denotation_key(denotation: Denotation, mode: str = MULTISET) -> str:
    """Grouping key consistent with :func:`~ambisql.sandbox.denotation_equal` in ``mode``."""
    if mode == ORDERED:
        ordered = "\n".join(denotation.row_keys).encode("utf-8")
        return denotation.fingerprint + ":" + hashlib.sha256(ordered).hexdigest()
    return denotation.fingerprint


@dataclass
class MatchReport:
    example_id: str
    gold_denotations: list[Denotation]
    predictions: list[PredictedItem]
    match_matrix: list[list[bool]]
    covered_gold_indices: set[int]
    missing_gold_indices: set[int]
    duplicate_groups: list[list[int]]
    failed_predictions: list[dict]
    tags: list[str] = field(default_factory=list)
    mode: str = MULTISET

    @property
    def n_golds(self) -> int:
        return len(self.gold_denotations)

    def to_dict(self) -> dict:
        return {
            "example_id": self.example_id,
            "gold_denotations": [d.to_dict() for d in self.gold_denotations],
            "predictions": [p.to_dict() for p in self.predictions],
            "match_matrix": self.match_matrix,
            "covered_gold_indices": sorted(self.covered_gold_indices),
            "missing_gold_indices": sorted(self.missing_gold_indices),
            "duplicate_groups": self.duplicate_groups,
            "failed_predictions": self.failed_predictions,
            "tags": self.tags,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MatchReport":
        return cls(
            example_id=data["example_id"],
            gold_denotations=[Denotation.from_dict(d) for d in data["gold_denotations"]],
            predictions=[PredictedItem.from_dict(p) for p in data["predictions"]],
            match_matrix=[list(row) for row in data["match_matrix"]],
            covered_gold_indices=set(data["covered_gold_indices"]),
            missing_gold_indices=set(data["missing_gold_indices"]),
            duplicate_groups=[list(g) for g in data["duplicate_groups"]],
            failed_predictions=list(data["failed_predictions"]),
            tags=list(data.get("tags", [])),
            mode=data.get("mode", MULTISET),
        )


def execute_gold(example: Example, sandbox: Sandbox, handle: DatabaseHandle) -> list[Denotation]:
    denotations = []
    for index, sql in enumerate(example.gold_sql):
        outcome = sandbox.execute(handle, sql)
        if not outcome.ok:
            raise GoldExecutionError(example.example_id, index, outcome)
        denotations.append(outcome.denotation)
    return denotations


def execute_predictions(
    predictions: Iterable[PredictedItem | str], sandbox: Sandbox, handle: DatabaseHandle
) -> list[PredictedItem]:
    executed = []
    for item in predictions:
        if isinstance(item, str):
            item = PredictedItem(sql=item)
        if item.outcome is None:
            item = dataclasses.replace(item, outcome=sandbox.execute(handle, item.sql))
        executed.append(item)
    return executed


def _groups(predictions: Sequence[PredictedItem], mode: str) -> list[list[int]]:
    groups: dict[str, list[int]] = {}
    for i, item in enumerate(predictions):
        if item.ok:
            groups.setdefault(denotation_key(item.outcome.denotation, mode), []).append(i)
    return list(groups.values())


def match_predictions(
    example: Example,
    predictions: Sequence[PredictedItem | str],
    sandbox: Sandbox,
    handle: DatabaseHandle | None = None,
    gold_denotations: list[Denotation] | None = None,
) -> MatchReport:
    """Execute predictions and golds on the example's database and compare denotations.

    Predictions that already carry an outcome are not re-executed.  Gold
    denotations may be passed in to avoid recomputing them.
    """
    own_handle = handle is None
    if own_handle:
        handle = sandbox.build(example.db)
    try:
        golds = gold_denotations if gold_denotations is not None else execute_gold(example, sandbox, handle)
        items = execute_predictions(predictions, sandbox, handle)
    finally:
        if own_handle:
            handle.close()

    matrix = []
    failed = []
    for i, item in enumerate(items):
        if item.ok:
            matrix.append([sandbox.equal(item.outcome.denotation, g) for g in golds])
        else:
            matrix.append([False] * len(golds))
            kind = item.outcome.kind if item.outcome else "not_executed"
            message = item.outcome.message if item.outcome else "no outcome"
            failed.append({"index": i, "kind": kind, "message": message})
    covered = {g for g in range(len(golds)) if any(row[g] for row in matrix)}
    return MatchReport(
        example_id=example.example_id,
        gold_denotations=list(golds),
        predictions=items,
        match_matrix=matrix,
        covered_gold_indices=covered,
        missing_gold_indices=set(range(len(golds))) - covered,
        duplicate_groups=_groups(items, sandbox.mode),
        failed_predictions=failed,
        tags=list(example.tags),
        mode=sandbox.mode,
    )


def dedup_by_denotation(predictions: Sequence[PredictedItem], mode: str = MULTISET) -> list[PredictedItem]:
    """Keep the first successful prediction per denotation, in input order.

    Failed predictions cannot be compared, so all of them are kept and marked
    ``unverifiable``.
    """
    seen = set()
    kept = []
    for item in predictions:
        if item.ok:
            key = denotation_key(item.outcome.denotation, mode)
            if key in seen:
                continue
            seen.add(key)
            kept.append(item)
        else:
            kept.append(dataclasses.replace(item, unverifiable=True))
    return kept


def coverage_sets(report: MatchReport) -> dict:
    matched = sum(1 for item, row in zip(report.predictions, report.match_matrix) if item.ok and any(row))
    return {
        "covered": set(report.covered_gold_indices),
        "missing": set(report.missing_gold_indices),
        "matched_prediction_count": matched,
        "distinct_prediction_denotations": len(report.duplicate_groups),
    }
