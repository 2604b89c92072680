from __future__ import annotations

import ast
import functools
from pathlib import Path

import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

import rivals
from rivals.executor import (
    BudgetExceeded,
    Executor,
    ExecutorError,
    PrimitiveFailure,
    SummaryKind,
    UnknownColumn,
    UnknownHandle,
    fuzzy_match,
    levenshtein,
    parse_cents,
    primitive as P,
    similarity,
    validate_program,
)
from rivals.scenario import EXECUTOR_DEFAULTS, fixture_inputs

PKG = Path(rivals.__file__).parent


def _ex():
    ex = Executor()
    frame = pd.DataFrame({"k": ["a", "b", "a", "c"], "v": ["1.50", "2.00", "(3.25)", None],
                          "d": ["2025-01-01", "2025-01-05", "2025-02-01", "2025-03-01"]})
    ex.load_input("t", frame, {"k": "string", "v": "cents", "d": "date"})
    return ex


# ---------------------------------------------------------------------------
# value helpers


@pytest.mark.parametrize("text, cents", [
    ("612.40", 61240), ("$1,204.51", 120451), ("(3.25)", -325), ("7", 700), ("", None), (None, None),
    ("abc", None), ("1.005", None),
])
def test_parse_cents(text, cents):
    assert parse_cents(text) == cents


def _lev_oracle(a: str, b: str) -> int:
    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))
    return d(len(a), len(b))


@given(st.text("abcd ", max_size=9), st.text("abcd ", max_size=9))
def test_levenshtein_matches_recursive_definition(a, b):
    assert levenshtein(a, b) == _lev_oracle(a, b) == levenshtein(b, a)


def test_similarity_examples():
    assert similarity("Northwind Health Partners", "northwind  health partners") == 1.0
    assert similarity("Bluewave Telecom", "Bluewave Telecomm") == pytest.approx(1 - 1 / 17)
    assert similarity("", "") == 1.0


# ---------------------------------------------------------------------------
# primitives


def test_load_types_and_handles():
    ex = _ex()
    h = ex.handle("input:t")
    assert h.columns == ("k", "v", "d") and h.row_count == 4
    with pytest.raises(UnknownHandle):
        ex.handle("h99")
    with pytest.raises(ExecutorError):
        ex.load_input("u", pd.DataFrame({"x": [1]}), {})


def test_filter_group_sort_and_aggregate():
    ex = _ex()
    h = ex.submit([P("filter", column="v", op="notnull"),
                   P("group_by", by=["k"], aggs={"n": ["count"], "total": ["sum", "v"]}),
                   P("sort", by=["k"])], ["input:t"])
    rows = ex.summarize(h.id, SummaryKind.SampleRows, n=5).content["rows"]
    assert rows == [{"k": "a", "n": 2, "total": -175}, {"k": "b", "n": 1, "total": 200}]
    agg = ex.submit([P("aggregate", aggs={"total": ["sum", "v"]})], ["input:t"])
    assert ex.summarize(agg.id, SummaryKind.SampleRows, n=1).content["rows"] == [{"total": 25}]


def test_union_difference_distinct_limit():
    ex = _ex()
    u = ex.submit([P("union", other=0)], ["input:t"])
    assert u.row_count == 8
    d = ex.submit([P("distinct", columns=["k"])], [u.id])
    assert d.row_count == 3
    diff = ex.submit([P("difference", other=1, on=["k"])], ["input:t", d.id])
    assert diff.row_count == 0
    assert ex.submit([P("limit", n=2)], ["input:t"]).row_count == 2


def test_window_pivot_unpivot_type_convert():
    ex = _ex()
    w = ex.submit([P("window", func="row_number", out="rn", partition_by=["k"], order_by=["d"])], ["input:t"])
    rows = ex.summarize(w.id, SummaryKind.SampleRows, n=4).content["rows"]
    assert [r["rn"] for r in rows] == [1, 1, 2, 1]
    pv = ex.submit([P("pivot", index="d", columns="k", values="v")], ["input:t"])
    assert set(pv.columns) >= {"d", "a", "b"}
    up = ex.submit([P("project", assign={"w": {"col": "v"}}),
                    P("unpivot", id_vars=["k"], value_vars=["v", "w"])], ["input:t"])
    assert up.row_count == 8
    tc = ex.submit([P("type_convert", column="d", to="string")], ["input:t"])
    assert dict(tc.schema)["d"].value == "string"


def test_control_primitives():
    ex = _ex()
    c = ex.submit([P("conditional", **{"if": {"column_exists": "zz"}, "then": [P("limit", n=1)],
                                       "else": [P("limit", n=3)]})], ["input:t"])
    assert c.row_count == 3
    f = ex.submit([P("fallback", primary=[P("select", columns=["zz"])], alternate=[P("select", columns=["k"])])],
                  ["input:t"])
    assert f.columns == ("k",)


def test_failures_name_the_primitive():
    ex = _ex()
    with pytest.raises(PrimitiveFailure) as err:
        ex.submit([P("limit", n=1), P("select", columns=["nope"])], ["input:t"])
    assert err.value.step_index == 1 and "nope" in err.value.reason
    with pytest.raises(PrimitiveFailure):
        validate_program([P("explode")])
    with pytest.raises(PrimitiveFailure):
        validate_program([P("limit")])
    with pytest.raises(ExecutorError):
        validate_program([])
    with pytest.raises(UnknownHandle):
        ex.submit([P("limit", n=1)], ["h42"])


def test_submit_is_memoized():
    ex = _ex()
    a = ex.submit([P("limit", n=2)], ["input:t"])
    b = ex.submit([P("limit", n=2)], ["input:t"])
    assert a.id == b.id and ex.last_edges == []


# ---------------------------------------------------------------------------
# summaries


def test_summaries_and_budget():
    ex = _ex()
    schema = ex.summarize("input:t", SummaryKind.SchemaOnly).content
    assert schema == {"columns": [["k", "string"], ["v", "cents"], ["d", "date"]], "row_count": 4}
    stats = ex.summarize("input:t", "Stats").content["columns"]["v"]
    assert stats["count"] == 3 and stats["min"] == -325 and stats["max"] == 200
    gb = ex.summarize("input:t", SummaryKind.GroupBreakdown, by="k", value="v").content["groups"]
    assert gb[0] == {"group": "a", "count": 2, "sum": -175}
    dist = ex.summarize("input:t", SummaryKind.Distribution, column="v", buckets=2).content
    assert sum(dist["counts"]) == 3 and dist["nulls"] == 1
    with pytest.raises(BudgetExceeded):
        ex.summarize("input:t", SummaryKind.SampleRows, n=21)
    with pytest.raises(UnknownColumn):
        ex.summarize("input:t", SummaryKind.Stats, columns=["zz"])


# ---------------------------------------------------------------------------
# fuzzy matching on the packaged fixture


def _fixture_executor():
    ex = Executor(EXECUTOR_DEFAULTS)
    for name, spec in fixture_inputs().items():
        ex.load_csv(name, spec["csv"], spec["schema"])
    return ex


def test_fuzzy_match_on_fixture():
    ex = _fixture_executor()
    inv = ex.submit([P("project", assign={"vendor": {"col": "provider"}, "amount_cents": {"to_cents": {"col": "amount_due"}},
                                          "invoice_date": {"to_date": {"col": "date_of_issue"}}})], ["input:telecom"])
    exp = ex.submit([P("project", assign={"amount_cents": {"to_cents": {"col": "amount"}},
                                          "payment_date": {"to_date": {"col": "payment_date"}}})], ["input:expenses"])
    h = fuzzy_match(ex, inv.id, exp.id, "vendor", "payee", period_end="2025-03-31")
    rows = ex.summarize(h.id, SummaryKind.SampleRows, n=3).content["rows"]
    statuses = [r["match_status"] for r in rows]
    assert statuses == ["MATCHED", "MATCHED", "PAYMENT_PENDING"]
    assert rows[0]["name_similarity"] == pytest.approx(round(1 - 1 / 17, 4))
    with pytest.raises(UnknownColumn):
        fuzzy_match(ex, inv.id, exp.id, "nope", "payee")


def test_manifest_replay_rebuilds_identical_handles():
    from rivals.orchestrator import load_input_record

    ex = _fixture_executor()
    h = ex.submit([P("filter", column="amount", op="notnull"), P("limit", n=3)], ["input:expenses"])
    clone = Executor.from_manifest(ex.manifest(), load_input_record, EXECUTOR_DEFAULTS)
    assert clone.handle(h.id) == h
    assert clone.summarize(h.id, "SampleRows", n=3) == ex.summarize(h.id, "SampleRows", n=3)


# ---------------------------------------------------------------------------
# isolation


AGENT_FACING = ("agents", "cascade", "kernel", "model", "plan")


@pytest.mark.parametrize("module", AGENT_FACING)
def test_agent_facing_modules_do_not_import_dataframe_libraries(module):
    tree = ast.parse((PKG / f"{module}.py").read_text())
    names = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            names |= {a.name.split(".")[0] for a in node.names}
        elif isinstance(node, ast.ImportFrom):
            names.add((node.module or "").split(".")[0])
            if node.module and node.module.endswith("executor"):
                names.add("executor")
    assert not names & {"pandas", "numpy", "executor"}


def _walk(obj, seen):
    if isinstance(obj, (pd.DataFrame, pd.Series)) or type(obj).__module__.startswith("numpy"):
        raise AssertionError(f"raw data type {type(obj).__name__} crossed the agent boundary")
    if id(obj) in seen:
        return
    seen.add(id(obj))
    if isinstance(obj, dict):
        for k, v in obj.items():
            _walk(k, seen)
            _walk(v, seen)
    elif isinstance(obj, (list, tuple, set, frozenset)):
        for v in obj:
            _walk(v, seen)
    elif hasattr(obj, "__dataclass_fields__"):
        for f in obj.__dataclass_fields__:
            _walk(getattr(obj, f), seen)


def test_no_raw_rows_in_session_log(scenario_run):
    seen: set = set()
    for ev in scenario_run.log:
        _walk(ev.payload, seen)
    # and everything the agents saw serializes as plain JSON
    for line in scenario_run.log.lines():
        assert "DataFrame" not in line
