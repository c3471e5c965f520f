"""Parsers for model output: interpretation lists and SQL."""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from .prompts import SENTINEL_PHRASES

_ENUM_MARKER = re.compile(r"^\s*(?:\(?\d+[.)]|[-*•])(?=\s|$)\s*")
_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_+-]*)[ \t]*\n?(.*?)```", re.S)
_SQL_START = re.compile(r"\bSELECT\b|\bWITH\s+(?:RECURSIVE\s+)?\w+\s*(?:\([^)]*\)\s*)?AS\s*\(", re.I)


class SQLExtractionError(ValueError):
    """Model output contained nothing that looks like SQL."""


@dataclass
class ParsedInterpretations:
    interps: list[str]
    all_covered: bool
    # Original non-empty lines, kept for auditing marker stripping.
    raw_lines: list[str] = field(default_factory=list)


def strip_marker(line: str) -> str:
    return _ENUM_MARKER.sub("", line, count=1).strip()


def is_sentinel(line: str) -> bool:
    text = strip_marker(line).strip().strip("\"'`").rstrip(".!").strip().lower()
    return text in SENTINEL_PHRASES


def parse_interpretations(text: str) -> ParsedInterpretations:
    """Split a model reply into interpretation lines and detect the sentinel."""
    interps = []
    raw_lines = []
    all_covered = False
    for line in (text or "").splitlines():
        if not line.strip():
            continue
        raw_lines.append(line)
        if is_sentinel(line):
            all_covered = True
            continue
        cleaned = strip_marker(line)
        if cleaned:
            interps.append(cleaned)
    return ParsedInterpretations(interps=interps, all_covered=all_covered, raw_lines=raw_lines)


def _trim_after_semicolon(sql: str) -> str:
    sql = sql.strip()
    last = sql.rfind(";")
    if last != -1:
        sql = sql[: last + 1]
    return sql.strip()


def extract_sql(text: str) -> str:
    """Pull a SQL query out of a model reply.

    A fenced code block wins; otherwise everything from the first SELECT/WITH
    keyword.  Prose after the final semicolon is dropped.
    """
    text = text or ""
    fence = _FENCE.search(text)
    if fence:
        body = fence.group(2).strip()
        if body:
            return _trim_after_semicolon(body)
    match = _SQL_START.search(text)
    if not match:
        raise SQLExtractionError(f"no SQL found in model output: {text[:80]!r}")
    return _trim_after_semicolon(text[match.start():])


def split_sql_statements(text: str) -> list[str]:
    """Split an end-to-end reply holding several queries.

    Pieces are separated by blank lines or by a semicolon at the end of a
    line; each piece must survive :func:`extract_sql` to be kept.
    """
    fences = _FENCE.findall(text or "")
    body = "\n\n".join(block for _, block in fences) if fences else (text or "")
    pieces = []
    for chunk in re.split(r"\n[ \t]*\n", body):
        pieces.extend(re.split(r"(?<=;)[ \t]*\n", chunk))
    statements = []
    for piece in pieces:
        if not piece.strip():
            continue
        try:
            statements.append(extract_sql(piece))
        except SQLExtractionError:
            continue
    return statements
