"""Ambiguity-aware text-to-SQL: disambiguate first, parse later."""
from .dataset_io import Example, load_dataset
from .matcher import MatchReport, PredictedItem, match_predictions
from .metrics import ExampleScore, MetricsSummary, aggregate, score_example
from .pipeline import METHODS, PipelineConfig, PipelineResult, disambiguate_then_parse, run_method
from .sandbox import DatabaseSpec, Denotation, ExecOutcome, Sandbox

__version__ = "0.1.0"

__all__ = [
    "DatabaseSpec",
    "Denotation",
    "Example",
    "ExampleScore",
    "ExecOutcome",
    "METHODS",
    "MatchReport",
    "MetricsSummary",
    "PipelineConfig",
    "PipelineResult",
    "PredictedItem",
    "Sandbox",
    "aggregate",
    "disambiguate_then_parse",
    "load_dataset",
    "match_predictions",
    "run_method",
    "score_example",
]
