"""Interpretation-coverage metrics computed from match reports.

Per example:

* single  -- at least one gold denotation is produced;
* full    -- every gold denotation is produced;
* recall  -- fraction of gold denotations produced;
* precision -- fraction of *distinct* predicted denotations that equal some
  gold denotation (undefined when nothing executed successfully).

Corpus numbers are macro averages in percent.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .matcher import MatchReport

COLUMNS = ("Single", "Full", "Recall", "Precision")


@dataclass(frozen=True)
class ExampleScore:
    example_id: str
    single: int
    full: int
    recall: float
    precision: float | None
    # Same ratio over raw (non-deduplicated) successful predictions.
    precision_raw: float | None = None
    n_golds: int = 0
    n_predictions: int = 0
    n_failed: int = 0
    tags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        out = asdict(self)
        out["tags"] = list(self.tags)
        return out


def score_example(report: MatchReport) -> ExampleScore:
    n_golds = report.n_golds
    if n_golds < 1:
        raise ValueError(f"{report.example_id}: cannot score an example without gold queries")
    covered = report.covered_gold_indices
    groups = report.duplicate_groups
    matched_groups = sum(1 for group in groups if any(any(report.match_matrix[i]) for i in group))
    successful = [i for i, p in enumerate(report.predictions) if p.ok]
    matched_raw = sum(1 for i in successful if any(report.match_matrix[i]))
    return ExampleScore(
        example_id=report.example_id,
        single=int(bool(covered)),
        full=int(not report.missing_gold_indices),
        recall=len(covered) / n_golds,
        precision=matched_groups / len(groups) if groups else None,
        precision_raw=matched_raw / len(successful) if successful else None,
        n_golds=n_golds,
        n_predictions=len(report.predictions),
        n_failed=len(report.failed_predictions),
        tags=tuple(report.tags),
    )


def score_unambiguous(report: MatchReport) -> dict:
    """For single-gold questions: found if the gold is among the predictions.

    Extra predictions are not penalized.
    """
    if report.n_golds != 1:
        raise ValueError(f"{report.example_id}: score_unambiguous needs exactly one gold, got {report.n_golds}")
    return {"found": int(0 in report.covered_gold_indices)}


@dataclass
class MetricsSummary:
    n_examples: int
    single_cov: float
    full_cov: float
    recall: float
    precision: float | None
    precision_raw: float | None
    n_precision_undefined: int
    n_predictions: int
    n_failed_predictions: int
    breakdown: dict[str, "MetricsSummary"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["breakdown"] = {tag: s.to_dict() for tag, s in self.breakdown.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_text(self, title: str = "all") -> str:
        rows = [(title, self)] + [(f"  {tag}", s) for tag, s in self.breakdown.items()]
        width = max(len(name) for name, _ in rows) + 2
        lines = [f"{'':<{width}}{'n':>6}" + "".join(f"{c:>11}" for c in COLUMNS)]
        for name, s in rows:
            values = [s.single_cov, s.full_cov, s.recall, s.precision]
            cells = "".join(f"{'-' if v is None else f'{v:.1f}':>11}" for v in values)
            lines.append(f"{name:<{width}}{s.n_examples:>6}{cells}")
        return "\n".join(lines) + "\n"


def _mean_percent(values: Sequence[float]) -> float | None:
    if not values:
        return None
    # fsum is exactly rounded, so the mean does not depend on score order.
    return 100.0 * math.fsum(values) / len(values)


def _summarize(scores: Sequence[ExampleScore]) -> MetricsSummary:
    defined = [s.precision for s in scores if s.precision is not None]
    defined_raw = [s.precision_raw for s in scores if s.precision_raw is not None]
    return MetricsSummary(
        n_examples=len(scores),
        single_cov=_mean_percent([s.single for s in scores]),
        full_cov=_mean_percent([s.full for s in scores]),
        recall=_mean_percent([s.recall for s in scores]),
        precision=_mean_percent(defined),
        precision_raw=_mean_percent(defined_raw),
        n_precision_undefined=len(scores) - len(defined),
        n_predictions=sum(s.n_predictions for s in scores),
        n_failed_predictions=sum(s.n_failed for s in scores),
    )


def aggregate(scores: Sequence[ExampleScore]) -> MetricsSummary:
    """Macro-average per-example scores, with a breakdown per tag value."""
    if not scores:
        raise ValueError("cannot aggregate an empty list of scores")
    summary = _summarize(scores)
    by_tag: dict[str, list[ExampleScore]] = {}
    for score in scores:
        for tag in score.tags:
            by_tag.setdefault(tag, []).append(score)
    summary.breakdown = {tag: _summarize(members) for tag, members in sorted(by_tag.items())}
    return summary
