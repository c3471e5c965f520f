"""Isolated in-memory SQLite databases, guarded execution, and denotations.

Every equivalence decision in the package goes through :class:`Denotation`:
the normalized multiset of rows a query returns.  Two queries "match" when
their denotations are equal, never by comparing SQL text.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import sqlite3
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Sequence

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_MS = 5000
DEFAULT_MAX_ROWS = 10_000
FLOAT_DECIMALS = 6

MULTISET = "multiset"
ORDERED = "ordered"
COMPARISON_MODES = (MULTISET, ORDERED)

OK = "ok"
SYNTAX_ERROR = "syntax_error"
RUNTIME_ERROR = "runtime_error"
TIMEOUT = "timeout"
OUTCOME_KINDS = (OK, SYNTAX_ERROR, RUNTIME_ERROR, TIMEOUT)

# Messages SQLite raises while *parsing* a statement.
_SYNTAX_MARKERS = (
    "syntax error",
    "incomplete input",
    "unrecognized token",
    "one statement at a time",
)

# Authorizer actions an evaluation query may perform.
_READ_ACTIONS = {
    sqlite3.SQLITE_SELECT,
    sqlite3.SQLITE_READ,
    sqlite3.SQLITE_FUNCTION,
    getattr(sqlite3, "SQLITE_RECURSIVE", 33),
}

_PROGRESS_INTERVAL = 1000


class DatabaseBuildError(Exception):
    """A dump statement failed while building a database."""

    def __init__(self, db_id: str, index: int, statement: str, message: str):
        self.db_id = db_id
        self.index = index
        self.statement = statement
        self.message = message
        preview = statement if len(statement) < 120 else statement[:117] + "..."
        super().__init__(f"database {db_id!r}: statement #{index} failed: {message} [{preview}]")


@dataclass(frozen=True)
class DatabaseSpec:
    """Schema plus content of one database, as a SQLite dump."""

    db_id: str
    dump_text: str
    descriptions: dict[str, str] | None = None
    # Source file of the dump when loaded by reference; kept for round-tripping.
    dump_path: str | None = field(default=None, compare=False)


@dataclass(frozen=True)
class ExecutionLimits:
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    max_rows: int = DEFAULT_MAX_ROWS


# ---------------------------------------------------------------------------
# Denotations


def _normalize_value(value: Any) -> Any:
    if value is None:
        return None
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if math.isnan(value):
            # SQLite itself stores NaN as NULL.
            return None
        if math.isinf(value):
            return value
        rounded = round(value, FLOAT_DECIMALS)
        if rounded.is_integer():
            return int(rounded)
        return rounded
    if isinstance(value, str):
        return value
    if isinstance(value, (bytes, bytearray, memoryview)):
        return bytes(value)
    raise TypeError(f"unsupported result value type: {type(value).__name__}")


def _tag(value: Any) -> list:
    if value is None:
        return ["n"]
    if isinstance(value, int):
        return ["i", str(value)]
    if isinstance(value, float):
        return ["f", repr(value)]
    if isinstance(value, str):
        return ["s", value]
    if isinstance(value, bytes):
        return ["b", value.hex()]
    raise TypeError(f"unnormalized value: {value!r}")


def _untag(tagged: Sequence[str]) -> Any:
    kind = tagged[0]
    if kind == "n":
        return None
    if kind == "i":
        return int(tagged[1])
    if kind == "f":
        return float(tagged[1])
    if kind == "s":
        return tagged[1]
    if kind == "b":
        return bytes.fromhex(tagged[1])
    raise ValueError(f"unknown value tag {kind!r}")


def _row_key(row: tuple) -> str:
    return json.dumps([_tag(v) for v in row], ensure_ascii=False, separators=(",", ":"))


@dataclass(frozen=True, eq=False)
class Denotation:
    """Normalized execution result.

    ``rows`` keeps the order the engine returned.  Equality and hashing use
    the order-insensitive multiset view; use :func:`denotation_equal` with
    ``mode="ordered"`` when row order matters.
    """

    columns: int
    rows: tuple[tuple, ...]
    truncated: bool = False

    @cached_property
    def row_keys(self) -> tuple[str, ...]:
        return tuple(_row_key(r) for r in self.rows)

    @cached_property
    def sorted_keys(self) -> tuple[str, ...]:
        return tuple(sorted(self.row_keys))

    @cached_property
    def fingerprint(self) -> str:
        # Canonical serialization: column count, truncation flag, sorted type-tagged rows.
        payload = json.dumps(
            {"columns": self.columns, "truncated": self.truncated, "rows": list(self.sorted_keys)},
            ensure_ascii=False,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Denotation):
            return NotImplemented
        return denotation_equal(self, other, MULTISET)

    def __hash__(self) -> int:
        return hash(self.fingerprint)

    def __len__(self) -> int:
        return len(self.rows)

    def to_dict(self) -> dict:
        return {
            "columns": self.columns,
            "row_count": len(self.rows),
            "truncated": self.truncated,
            "fingerprint": self.fingerprint,
            "rows": [[_tag(v) for v in row] for row in self.rows],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Denotation":
        rows = tuple(tuple(_untag(v) for v in row) for row in data["rows"])
        return cls(columns=data["columns"], rows=rows, truncated=data.get("truncated", False))


def normalize_result(raw_rows: Iterable[Sequence[Any]], column_count: int, truncated: bool = False) -> Denotation:
    """Turn raw engine rows into a :class:`Denotation`.

    NULL stays ``None``; floats are rounded to six decimals and integral
    floats become ints; strings and blobs are kept byte-exact.
    """
    rows = []
    for i, raw in enumerate(raw_rows):
        if len(raw) != column_count:
            raise ValueError(f"ragged result: row {i} has {len(raw)} values, expected {column_count}")
        rows.append(tuple(_normalize_value(v) for v in raw))
    return Denotation(columns=column_count, rows=tuple(rows), truncated=truncated)


def denotation_equal(a: Denotation, b: Denotation, mode: str = MULTISET) -> bool:
    if mode not in COMPARISON_MODES:
        raise ValueError(f"unknown comparison mode {mode!r}")
    if a.columns != b.columns or a.truncated != b.truncated or len(a.rows) != len(b.rows):
        return False
    if mode == ORDERED:
        return a.row_keys == b.row_keys
    return a.sorted_keys == b.sorted_keys


# ---------------------------------------------------------------------------
# Execution outcomes


@dataclass(frozen=True)
class ExecOutcome:
    """Result of running one query: a denotation or a classified failure."""

    kind: str
    denotation: Denotation | None = None
    message: str | None = None
    limit_ms: int | None = None

    def __post_init__(self):
        if self.kind not in OUTCOME_KINDS:
            raise ValueError(f"unknown outcome kind {self.kind!r}")
        if self.kind == OK and self.denotation is None:
            raise ValueError("ok outcome requires a denotation")
        if self.kind != OK and not self.message:
            raise ValueError("error outcomes require a message")

    @property
    def ok(self) -> bool:
        return self.kind == OK

    @classmethod
    def success(cls, denotation: Denotation) -> "ExecOutcome":
        return cls(OK, denotation=denotation)

    @classmethod
    def syntax_error(cls, message: str) -> "ExecOutcome":
        return cls(SYNTAX_ERROR, message=message)

    @classmethod
    def runtime_error(cls, message: str) -> "ExecOutcome":
        return cls(RUNTIME_ERROR, message=message)

    @classmethod
    def timeout(cls, limit_ms: int) -> "ExecOutcome":
        return cls(TIMEOUT, message=f"query exceeded {limit_ms} ms", limit_ms=limit_ms)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        if self.denotation is not None:
            out["denotation"] = self.denotation.to_dict()
        if self.message is not None:
            out["message"] = self.message
        if self.limit_ms is not None:
            out["limit_ms"] = self.limit_ms
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExecOutcome":
        den = data.get("denotation")
        return cls(
            kind=data["kind"],
            denotation=Denotation.from_dict(den) if den is not None else None,
            message=data.get("message"),
            limit_ms=data.get("limit_ms"),
        )


# ---------------------------------------------------------------------------
# Databases


def split_statements(dump_text: str) -> list[str]:
    """Split a dump into complete SQL statements, keeping quoted semicolons intact."""
    statements = []
    buf = ""
    parts = dump_text.split(";")
    for i, part in enumerate(parts):
        buf += part
        if i < len(parts) - 1:
            buf += ";"
            if sqlite3.complete_statement(buf):
                if buf.strip(" \t\r\n;"):
                    statements.append(buf.strip())
                buf = ""
    if buf.strip():
        statements.append(buf.strip())
    return statements


class DatabaseHandle:
    """One isolated in-memory database built from a dump.

    Not safe for concurrent use; build one handle per in-flight task.
    """

    def __init__(self, spec: DatabaseSpec, connection: sqlite3.Connection):
        self.spec = spec
        self._conn = connection
        self._deadline: float | None = None
        self._timed_out = False
        self._denied: list[str] = []
        self._conn.set_authorizer(self._authorize)
        self._conn.set_progress_handler(self._progress, _PROGRESS_INTERVAL)

    @property
    def spec_ref(self) -> str:
        return self.spec.db_id

    def _authorize(self, action, arg1, arg2, db_name, trigger):
        if action in _READ_ACTIONS:
            return sqlite3.SQLITE_OK
        if action == sqlite3.SQLITE_PRAGMA and arg2 is None:
            return sqlite3.SQLITE_OK
        self._denied.append(f"action {action} on {arg1}")
        return sqlite3.SQLITE_DENY

    def _progress(self) -> int:
        if self._deadline is not None and time.perf_counter() > self._deadline:
            self._timed_out = True
            return 1
        return 0

    def execute(self, sql: str, limits: ExecutionLimits | None = None) -> ExecOutcome:
        limits = limits or ExecutionLimits()
        if not sql or not sql.strip().strip(";").strip():
            return ExecOutcome.syntax_error("empty query")
        self._timed_out = False
        self._denied = []
        self._deadline = time.perf_counter() + limits.timeout_ms / 1000.0
        try:
            cursor = self._conn.execute(sql)
            fetched = cursor.fetchmany(limits.max_rows + 1) if cursor.description else []
            columns = len(cursor.description) if cursor.description else 0
            cursor.close()
        except (sqlite3.Error, sqlite3.Warning) as exc:
            return self._classify(exc, limits)
        finally:
            self._deadline = None
        truncated = len(fetched) > limits.max_rows
        if truncated:
            logger.warning("result of %s truncated at %d rows", self.spec.db_id, limits.max_rows)
            fetched = fetched[: limits.max_rows]
        return ExecOutcome.success(normalize_result(fetched, columns, truncated=truncated))

    def _classify(self, exc: Exception, limits: ExecutionLimits) -> ExecOutcome:
        message = str(exc) or type(exc).__name__
        if self._timed_out:
            return ExecOutcome.timeout(limits.timeout_ms)
        if self._denied:
            return ExecOutcome.runtime_error(f"mutating statement rejected ({self._denied[0]}): {message}")
        lowered = message.lower()
        if any(marker in lowered for marker in _SYNTAX_MARKERS):
            return ExecOutcome.syntax_error(message)
        return ExecOutcome.runtime_error(message)

    def close(self) -> None:
        self._conn.close()

    def __enter__(self) -> "DatabaseHandle":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def build_database(spec: DatabaseSpec) -> DatabaseHandle:
    """Build a fresh in-memory database from ``spec.dump_text``.

    Raises :class:`DatabaseBuildError` naming the index of the first
    statement that fails.
    """
    conn = sqlite3.connect(":memory:", isolation_level=None, check_same_thread=False)
    for index, statement in enumerate(split_statements(spec.dump_text)):
        try:
            conn.execute(statement)
        except (sqlite3.Error, sqlite3.Warning) as exc:
            conn.close()
            raise DatabaseBuildError(spec.db_id, index, statement, str(exc)) from exc
    if conn.in_transaction:
        conn.execute("COMMIT")
    return DatabaseHandle(spec, conn)


def execute(handle: DatabaseHandle, sql: str, limits: ExecutionLimits | None = None) -> ExecOutcome:
    return handle.execute(sql, limits)


@dataclass
class Sandbox:
    """Execution settings shared by the matcher, pipeline and annotator."""

    limits: ExecutionLimits = field(default_factory=ExecutionLimits)
    mode: str = MULTISET

    def __post_init__(self):
        if self.mode not in COMPARISON_MODES:
            raise ValueError(f"unknown comparison mode {self.mode!r}")

    def build(self, spec: DatabaseSpec) -> DatabaseHandle:
        return build_database(spec)

    def execute(self, handle: DatabaseHandle, sql: str) -> ExecOutcome:
        return handle.execute(sql, self.limits)

    def equal(self, a: Denotation, b: Denotation) -> bool:
        return denotation_equal(a, b, self.mode)
