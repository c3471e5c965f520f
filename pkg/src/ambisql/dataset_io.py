"""Loading, validating, filtering and writing ambiguous text-to-SQL examples.

The canonical on-disk format is JSONL, one example per line::

    {"example_id": ..., "db_id": ..., "db_dump": ... | "db_dump_path": ...,
     "question": ..., "gold_sql": [...], "gold_interpretations": [...],
     "is_ambiguous": ..., "tags": [...]}

Adapters map the AmbiQT and Ambrosia release layouts into the same shape.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import sqlite3
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .sandbox import DatabaseSpec, ExecutionLimits, Sandbox

logger = logging.getLogger(__name__)

FORMATS = ("canonical", "ambiqt", "ambrosia")

ERROR = "error"
WARNING = "warning"


class DatasetError(Exception):
    """Raised when a dataset file cannot be turned into valid examples."""


class ConfigurationError(DatasetError):
    pass


@dataclass
class Example:
    example_id: str
    db: DatabaseSpec
    question: str
    gold_sql: list[str]
    gold_interpretations: list[str] | None = None
    is_ambiguous: bool | None = None
    tags: list[str] = field(default_factory=list)
    # Synonym pair for interpretation synthesis (AmbiQT column/table ambiguity).
    synonyms: list[str] | None = None

    @property
    def db_id(self) -> str:
        return self.db.db_id


@dataclass(frozen=True)
class Violation:
    severity: str
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.field}: {self.message}"


def validate_example(example: Example) -> list[Violation]:
    """Return every invariant the example breaks; an empty list means valid."""
    problems = []
    if not example.example_id:
        problems.append(Violation(ERROR, "example_id", "empty example id"))
    if not example.question or not example.question.strip():
        problems.append(Violation(ERROR, "question", "empty question"))
    if not example.gold_sql:
        problems.append(Violation(ERROR, "gold_sql", "at least one gold query is required"))
    elif any(not isinstance(q, str) or not q.strip() for q in example.gold_sql):
        problems.append(Violation(ERROR, "gold_sql", "gold queries must be non-empty strings"))
    if example.gold_interpretations is not None and len(example.gold_interpretations) != len(example.gold_sql):
        problems.append(
            Violation(
                ERROR,
                "gold_interpretations",
                f"{len(example.gold_interpretations)} interpretations for {len(example.gold_sql)} gold queries",
            )
        )
    if example.is_ambiguous and len(example.gold_sql) < 2:
        problems.append(Violation(WARNING, "is_ambiguous", "flagged ambiguous but has a single gold query"))
    if not example.db.dump_text.strip():
        problems.append(Violation(ERROR, "db", f"database {example.db.db_id!r} has an empty dump"))
    return problems


# ---------------------------------------------------------------------------
# Canonical JSONL


class _DatabaseRegistry:
    """Shares one DatabaseSpec per db_id and rejects conflicting dumps."""

    def __init__(self):
        self._specs: dict[str, DatabaseSpec] = {}

    def get(self, db_id: str, dump_text: str, descriptions=None, dump_path=None) -> DatabaseSpec:
        existing = self._specs.get(db_id)
        if existing is not None:
            if existing.dump_text != dump_text:
                raise DatasetError(f"db_id {db_id!r} is used with two different dumps")
            return existing
        spec = DatabaseSpec(db_id=db_id, dump_text=dump_text, descriptions=descriptions, dump_path=dump_path)
        self._specs[db_id] = spec
        return spec


def _require(record: dict, key: str, index: int):
    if key not in record or record[key] is None:
        raise DatasetError(f"example #{index}: missing required field {key!r}")
    return record[key]


def _check(example: Example, index: int) -> Example:
    errors = [v for v in validate_example(example) if v.severity == ERROR]
    if errors:
        raise DatasetError(f"example #{index} ({example.example_id}): {errors[0].field}: {errors[0].message}")
    for warning in validate_example(example):
        if warning.severity == WARNING:
            logger.warning("example %s: %s", example.example_id, warning)
    return example


def _read_text(path: Path) -> str:
    return path.read_text(encoding="utf-8")


def _load_canonical(path: Path) -> list[Example]:
    registry = _DatabaseRegistry()
    examples = []
    with path.open(encoding="utf-8") as fh:
        for index, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"example #{index}: invalid JSON: {exc}") from exc
            examples.append(_check(_canonical_from_record(record, index, path.parent, registry), index))
    return examples


def _canonical_from_record(record: dict, index: int, base_dir: Path, registry: _DatabaseRegistry) -> Example:
    db_id = _require(record, "db_id", index)
    dump_path = record.get("db_dump_path")
    if "db_dump" in record:
        dump_text = record["db_dump"]
    elif dump_path is not None:
        full = Path(dump_path) if os.path.isabs(dump_path) else base_dir / dump_path
        try:
            dump_text = _read_text(full)
        except OSError as exc:
            raise DatasetError(f"example #{index}: cannot read db_dump_path {dump_path!r}: {exc}") from exc
    else:
        raise DatasetError(f"example #{index}: missing required field 'db_dump' (or 'db_dump_path')")
    spec = registry.get(db_id, dump_text, record.get("db_descriptions"), dump_path if "db_dump" not in record else None)
    gold_sql = _require(record, "gold_sql", index)
    if not isinstance(gold_sql, list):
        raise DatasetError(f"example #{index}: gold_sql must be a list")
    return Example(
        example_id=str(_require(record, "example_id", index)),
        db=spec,
        question=_require(record, "question", index),
        gold_sql=list(gold_sql),
        gold_interpretations=record.get("gold_interpretations"),
        is_ambiguous=record.get("is_ambiguous"),
        tags=list(record.get("tags", [])),
        synonyms=record.get("synonyms"),
    )


def example_to_record(example: Example) -> dict:
    """Canonical JSON object for one example, in stable field order."""
    record: dict = {"example_id": example.example_id, "db_id": example.db.db_id}
    if example.db.dump_path is not None:
        record["db_dump_path"] = example.db.dump_path
    else:
        record["db_dump"] = example.db.dump_text
    if example.db.descriptions:
        record["db_descriptions"] = example.db.descriptions
    record["question"] = example.question
    record["gold_sql"] = list(example.gold_sql)
    if example.gold_interpretations is not None:
        record["gold_interpretations"] = list(example.gold_interpretations)
    if example.is_ambiguous is not None:
        record["is_ambiguous"] = example.is_ambiguous
    record["tags"] = list(example.tags)
    if example.synonyms is not None:
        record["synonyms"] = list(example.synonyms)
    return record


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file in the same directory and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_canonical(examples: list[Example], path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps_jsonl(example_to_record(e) for e in examples))


# ---------------------------------------------------------------------------
# Source dataset adapters


def _iter_records(path: Path) -> Iterator[dict]:
    """Yield dict records from a JSON array, JSONL or CSV file."""
    if path.suffix.lower() == ".csv":
        with path.open(encoding="utf-8", newline="") as fh:
            yield from csv.DictReader(fh)
        return
    text = _read_text(path)
    stripped = text.lstrip()
    if stripped.startswith("["):
        yield from json.loads(text)
        return
    for line in text.splitlines():
        if line.strip():
            yield json.loads(line)


def _dump_from_sqlite(db_file: Path) -> str:
    conn = sqlite3.connect(f"file:{db_file}?mode=ro", uri=True)
    try:
        return "\n".join(conn.iterdump())
    finally:
        conn.close()


def _resolve_dump(db_id: str, base_dir: Path, record: dict, index: int) -> str:
    if record.get("db_dump"):
        return record["db_dump"]
    candidates = []
    if record.get("db_file"):
        candidates.append(base_dir / record["db_file"])
    for root in (base_dir, base_dir / "database", base_dir / "databases"):
        candidates += [
            root / f"{db_id}.sql",
            root / db_id / f"{db_id}.sql",
            root / db_id / "schema_and_data.sql",
            root / f"{db_id}.sqlite",
            root / db_id / f"{db_id}.sqlite",
        ]
    for candidate in candidates:
        if candidate.is_file():
            if candidate.suffix in (".sqlite", ".db"):
                return _dump_from_sqlite(candidate)
            return _read_text(candidate)
    raise DatasetError(f"example #{index}: no database dump found for db_id {db_id!r} under {base_dir}")


def _as_list(value) -> list[str]:
    if value is None or value == "":
        return []
    if isinstance(value, list):
        return [str(v) for v in value]
    text = str(value).strip()
    if text.startswith("["):
        return [str(v) for v in json.loads(text)]
    return [part.strip() for part in text.split("\n\n") if part.strip()]


def _as_bool(value) -> bool | None:
    if value is None or value == "":
        return None
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes")


_AMBIQT_GOLD_KEYS = (("query1", "query2"), ("sql1", "sql2"), ("orig_query", "new_query"))


def _load_ambiqt(path: Path) -> list[Example]:
    registry = _DatabaseRegistry()
    examples = []
    for index, record in enumerate(_iter_records(path)):
        db_id = _require(record, "db_id", index)
        if "gold_sql" in record or "queries" in record:
            gold = _as_list(record.get("gold_sql", record.get("queries")))
        else:
            gold = []
            for first, second in _AMBIQT_GOLD_KEYS:
                if first in record and second in record:
                    gold = [record[first], record[second]]
                    break
            if not gold:
                raise DatasetError(f"example #{index}: missing required field 'query1'/'query2'")
        tag = record.get("ambig_type") or record.get("type") or record.get("ambiguity")
        spec = registry.get(db_id, _resolve_dump(db_id, path.parent, record, index))
        interps = _as_list(record.get("gold_interpretations")) or None
        synonyms = _as_list(record.get("synonyms")) or None
        examples.append(
            _check(
                Example(
                    example_id=str(record.get("id", record.get("example_id", f"ambiqt-{index}"))),
                    db=spec,
                    question=_require(record, "question", index),
                    gold_sql=gold,
                    gold_interpretations=interps,
                    is_ambiguous=True,
                    tags=[tag] if tag else [],
                    synonyms=synonyms,
                ),
                index,
            )
        )
    return examples


def _load_ambrosia(path: Path) -> list[Example]:
    registry = _DatabaseRegistry()
    examples = []
    for index, record in enumerate(_iter_records(path)):
        db_file = record.get("db_file") or ""
        db_id = record.get("db_id") or (Path(db_file).stem if db_file else None)
        if not db_id:
            raise DatasetError(f"example #{index}: missing required field 'db_file' (or 'db_id')")
        gold = _as_list(_require(record, "gold_queries", index))
        interps = _as_list(record.get("nl_interpretations") or record.get("interpretations"))
        tags = [t for t in (record.get("ambig_type"), record.get("domain")) if t]
        examples.append(
            _check(
                Example(
                    example_id=str(record.get("id", record.get("example_id", f"ambrosia-{index}"))),
                    db=registry.get(db_id, _resolve_dump(db_id, path.parent, record, index)),
                    question=_require(record, "question", index),
                    gold_sql=gold,
                    gold_interpretations=interps or None,
                    is_ambiguous=_as_bool(record.get("is_ambiguous")),
                    tags=tags,
                ),
                index,
            )
        )
    return examples


def load_dataset(path: str | os.PathLike, format: str = "canonical") -> list[Example]:
    """Load examples from ``path`` in one of :data:`FORMATS`."""
    if format not in FORMATS:
        raise ConfigurationError(f"unknown dataset format {format!r}; expected one of {', '.join(FORMATS)}")
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset not found: {path}")
    if format == "canonical":
        return _load_canonical(path)
    if format == "ambiqt":
        return _load_ambiqt(path)
    return _load_ambrosia(path)


# ---------------------------------------------------------------------------
# Filtering


def filter_nonempty(examples: list[Example], sandbox: Sandbox | None = None) -> list[Example]:
    """Keep the examples whose gold queries all execute and return at least one row.

    A gold query that fails is logged and its example dropped; a database that
    cannot be built raises :class:`~ambisql.sandbox.DatabaseBuildError`.
    """
    sandbox = sandbox or Sandbox(limits=ExecutionLimits())
    kept = []
    by_db: dict[str, list[Example]] = {}
    for example in examples:
        by_db.setdefault(example.db.db_id, []).append(example)
    keep_ids = set()
    for db_id, group in by_db.items():
        with sandbox.build(group[0].db) as handle:
            for example in group:
                for i, sql in enumerate(example.gold_sql):
                    outcome = sandbox.execute(handle, sql)
                    if not outcome.ok:
                        logger.warning("dropping %s: gold #%d failed: %s", example.example_id, i, outcome.message)
                        break
                    if len(outcome.denotation) == 0:
                        logger.info("dropping %s: gold #%d returns no rows", example.example_id, i)
                        break
                else:
                    keep_ids.add(id(example))
    for example in examples:
        if id(example) in keep_ids:
            kept.append(example)
    return kept
