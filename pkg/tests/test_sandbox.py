import math
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ambisql.sandbox import (
    MULTISET,
    ORDERED,
    DatabaseBuildError,
    DatabaseSpec,
    Denotation,
    ExecOutcome,
    ExecutionLimits,
    Sandbox,
    build_database,
    denotation_equal,
    execute,
    normalize_result,
    split_statements,
)

T_DUMP = "CREATE TABLE t(a INT, b INT); INSERT INTO t VALUES (1, 2); INSERT INTO t VALUES (3, 4);"


@pytest.fixture
def handle():
    with build_database(DatabaseSpec("t", T_DUMP)) as h:
        yield h


def run(handle, sql, **limits):
    return execute(handle, sql, ExecutionLimits(**limits) if limits else None)


def test_empty_dump_builds_empty_schema():
    with build_database(DatabaseSpec("empty", "")) as h:
        out = execute(h, "SELECT COUNT(*) FROM sqlite_master")
    assert out.ok and out.denotation.rows == ((0,),)


def test_count_after_build():
    spec = DatabaseSpec("t", "CREATE TABLE t(a INT); INSERT INTO t VALUES (1),(2);")
    with build_database(spec) as h:
        assert execute(h, "SELECT COUNT(*) FROM t").denotation.rows == ((2,),)


def test_malformed_ddl_reports_statement_index():
    spec = DatabaseSpec("bad", "CREATE TABLE ok(a INT);\nCREATE t (a INT);\nCREATE TABLE z(a INT);")
    with pytest.raises(DatabaseBuildError) as info:
        build_database(spec)
    assert info.value.index == 1


def test_dump_with_transaction_wrapper():
    dump = "BEGIN TRANSACTION;\nCREATE TABLE t(a INT);\nINSERT INTO t VALUES(5);\nCOMMIT;\n"
    with build_database(DatabaseSpec("tx", dump)) as h:
        assert execute(h, "SELECT a FROM t").denotation.rows == ((5,),)


def test_split_statements_keeps_semicolons_in_strings():
    parts = split_statements("INSERT INTO t VALUES ('a;b');\nSELECT 1;")
    assert len(parts) == 2 and "'a;b'" in parts[0]


def test_select_one(handle):
    out = run(handle, "SELECT 1")
    assert out.kind == "ok" and out.denotation.rows == ((1,),)


def test_syntax_vs_runtime_error(handle):
    assert run(handle, "SELEC 1").kind == "syntax_error"
    out = run(handle, "SELECT missing_col FROM t")
    assert out.kind == "runtime_error" and "missing_col" in out.message


@pytest.mark.parametrize(
    "sql",
    ["DELETE FROM t", "DROP TABLE t", "INSERT INTO t VALUES (9, 9)", "UPDATE t SET a = 0", "CREATE TABLE u(x)"],
)
def test_mutations_rejected(handle, sql):
    out = run(handle, sql)
    assert out.kind in ("runtime_error", "syntax_error")
    assert run(handle, "SELECT COUNT(*) FROM t").denotation.rows == ((2,),)


BIG_DUMP = """CREATE TABLE big(x INT);
INSERT INTO big WITH RECURSIVE c(n) AS (SELECT 1 UNION ALL SELECT n + 1 FROM c WHERE n < 10000) SELECT n FROM c;
"""


def test_timeout_on_slow_query():
    with build_database(DatabaseSpec("big", BIG_DUMP)) as h:
        assert execute(h, "SELECT COUNT(*) FROM big").denotation.rows == ((10000,),)
        start = time.monotonic()
        out = execute(h, "SELECT COUNT(*) FROM big a, big b", ExecutionLimits(timeout_ms=100))
        elapsed = time.monotonic() - start
    assert out.kind == "timeout" and out.limit_ms == 100
    assert elapsed < 2.0


def test_truncation_flag():
    with build_database(DatabaseSpec("e", "")) as h:
        sql = "WITH RECURSIVE c(n) AS (SELECT 1 UNION ALL SELECT n+1 FROM c) SELECT n FROM c"
        out = execute(h, sql, ExecutionLimits(max_rows=50))
    assert out.ok and out.denotation.truncated and len(out.denotation.rows) == 50


def test_column_order_significant():
    with build_database(DatabaseSpec("t", "CREATE TABLE t(a INT, b INT); INSERT INTO t VALUES (1, 2);")) as h:
        ab = execute(h, "SELECT a, b FROM t").denotation
        ba = execute(h, "SELECT b, a FROM t").denotation
    assert not denotation_equal(ab, ba)


def test_order_by_modes(handle):
    up = run(handle, "SELECT a FROM t ORDER BY a").denotation
    down = run(handle, "SELECT a FROM t ORDER BY a DESC").denotation
    assert denotation_equal(up, down, MULTISET)
    assert not denotation_equal(up, down, ORDERED)


def test_normalization_examples():
    assert normalize_result([(1.0000004,)], 1) == normalize_result([(1.0,)], 1)
    assert normalize_result([(1.0,)], 1).rows == ((1,),)
    two_nulls = normalize_result([(None,), (None,)], 1)
    assert len(two_nulls) == 2 and two_nulls != normalize_result([(None,)], 1)
    empty = normalize_result([], 1)
    assert empty.rows == () and empty.fingerprint == normalize_result([], 1).fingerprint
    assert normalize_result([(float("nan"),)], 1).rows == ((None,),)
    assert normalize_result([(True,)], 1).rows == ((1,),)


def test_ragged_rows_rejected():
    with pytest.raises(ValueError):
        normalize_result([(1, 2), (3,)], 2)


def test_truncated_only_equals_identical_truncation():
    full = normalize_result([(1,), (2,)], 1)
    cut = normalize_result([(1,), (2,)], 1, truncated=True)
    assert full != cut
    assert cut == normalize_result([(2,), (1,)], 1, truncated=True)


def test_denotation_round_trip():
    den = normalize_result([(1, "x", None, 2.5, b"\x00\xff")], 5)
    back = Denotation.from_dict(den.to_dict())
    assert back.rows == den.rows and back.fingerprint == den.fingerprint


def test_outcome_round_trip(handle):
    for out in (run(handle, "SELECT a, b FROM t"), run(handle, "SELEC"), ExecOutcome.timeout(100)):
        back = ExecOutcome.from_dict(out.to_dict())
        assert back.kind == out.kind and back.message == out.message
        if out.ok:
            assert back.denotation == out.denotation


def test_execution_deterministic_and_rebuildable():
    spec = DatabaseSpec("t", T_DUMP)
    sandbox = Sandbox()
    with sandbox.build(spec) as h1, sandbox.build(spec) as h2:
        first = sandbox.execute(h1, "SELECT a * 1.5, b FROM t")
        again = sandbox.execute(h1, "SELECT a * 1.5, b FROM t")
        other = sandbox.execute(h2, "SELECT a * 1.5, b FROM t")
    assert first.denotation.row_keys == again.denotation.row_keys == other.denotation.row_keys


def test_handles_are_isolated():
    spec = DatabaseSpec("t", T_DUMP)
    h1 = build_database(spec)
    with build_database(spec) as h2:
        h1.close()
        assert execute(h2, "SELECT COUNT(*) FROM t").denotation.rows == ((2,),)


# Property tests

values = st.one_of(
    st.none(),
    st.integers(-5, 5),
    st.sampled_from([0.5, 1.25, 2.0, 1.0000004, -0.1234567]),
    st.sampled_from(["", "a", "b", "ab"]),
)


@st.composite
def denotations(draw, columns=None):
    cols = columns if columns is not None else draw(st.integers(1, 2))
    rows = draw(st.lists(st.tuples(*[values] * cols), max_size=4))
    return normalize_result(rows, cols, truncated=draw(st.booleans()) and bool(rows))


def brute_force_equal(a: Denotation, b: Denotation) -> bool:
    if a.columns != b.columns or a.truncated != b.truncated:
        return False
    remaining = list(b.rows)
    for row in a.rows:
        for i, other in enumerate(remaining):
            if all(_same(x, y) for x, y in zip(row, other)):
                del remaining[i]
                break
        else:
            return False
    return not remaining


def _same(x, y) -> bool:
    if x is None or y is None:
        return x is y
    if isinstance(x, str) != isinstance(y, str):
        return False
    return x == y


@settings(max_examples=200, deadline=None)
@given(denotations(), denotations(), denotations())
def test_equivalence_relation(a, b, c):
    for mode in (MULTISET, ORDERED):
        assert denotation_equal(a, a, mode)
        assert denotation_equal(a, b, mode) == denotation_equal(b, a, mode)
        if denotation_equal(a, b, mode) and denotation_equal(b, c, mode):
            assert denotation_equal(a, c, mode)


@settings(max_examples=300, deadline=None)
@given(denotations(columns=1), denotations(columns=1))
def test_fingerprint_iff_multiset_equal(a, b):
    assert (a.fingerprint == b.fingerprint) == denotation_equal(a, b, MULTISET)
    assert denotation_equal(a, b, MULTISET) == brute_force_equal(a, b)


@settings(max_examples=100, deadline=None)
@given(denotations(), st.randoms(use_true_random=False))
def test_permutation_invariance(den, rnd):
    rows = list(den.rows)
    rnd.shuffle(rows)
    shuffled = Denotation(den.columns, tuple(rows), den.truncated)
    assert denotation_equal(den, shuffled, MULTISET)
    assert shuffled.fingerprint == den.fingerprint


@given(st.floats(allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6))
def test_rounding_is_idempotent(x):
    once = normalize_result([(x,)], 1).rows[0][0]
    twice = normalize_result([(once,)], 1).rows[0][0]
    assert once == twice
    assert math.isclose(float(once), x, abs_tol=1e-6)
