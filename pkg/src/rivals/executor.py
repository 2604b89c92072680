"""The isolated execution layer: data handles, transformation primitives, summaries.

Raw rows live only inside :class:`Executor`. Callers get back
:class:`DataHandle` tokens and :class:`Summary` views; nothing in here returns a
frame to agent-facing code. Money is integer cents throughout.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import date, datetime
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import pandas as pd

DEFAULT_SAMPLE_BUDGET = 20


class ExecutorError(Exception):
    pass


class UnknownHandle(ExecutorError):
    pass


class UnknownColumn(ExecutorError):
    pass


class BudgetExceeded(ExecutorError):
    pass


class PrimitiveFailure(ExecutorError):
    def __init__(self, step_index: int, reason: str):
        super().__init__(f"primitive {step_index}: {reason}")
        self.step_index = step_index
        self.reason = reason


class SemanticType(str, enum.Enum):
    string = "string"
    integer = "integer"
    cents = "cents"
    float = "float"
    date = "date"
    boolean = "boolean"


_NUMERIC = {SemanticType.integer, SemanticType.cents, SemanticType.float}

STRUCTURAL = frozenset({
    "filter", "select", "project", "join", "aggregate", "group_by", "pivot", "unpivot", "union",
    "difference", "distinct", "sort", "limit", "window", "type_convert",
})
CONTROL = frozenset({"conditional", "fallback", "checkpoint_mark"})
PRIMITIVES = STRUCTURAL | CONTROL

# required / optional argument names per primitive
ARG_SCHEMA: dict[str, tuple[frozenset, frozenset]] = {
    "filter": (frozenset({"column", "op"}), frozenset({"value"})),
    "select": (frozenset({"columns"}), frozenset()),
    "project": (frozenset({"assign"}), frozenset({"drop"})),
    "join": (frozenset({"right", "how"}), frozenset({"left_on", "right_on", "fuzzy"})),
    "aggregate": (frozenset({"aggs"}), frozenset()),
    "group_by": (frozenset({"by", "aggs"}), frozenset()),
    "pivot": (frozenset({"index", "columns", "values"}), frozenset({"agg"})),
    "unpivot": (frozenset({"id_vars", "value_vars"}), frozenset({"var_name", "value_name"})),
    "union": (frozenset({"other"}), frozenset()),
    "difference": (frozenset({"other"}), frozenset({"on"})),
    "distinct": (frozenset(), frozenset({"columns"})),
    "sort": (frozenset({"by"}), frozenset({"descending"})),
    "limit": (frozenset({"n"}), frozenset()),
    "window": (frozenset({"func", "out"}), frozenset({"column", "partition_by", "order_by", "offset"})),
    "type_convert": (frozenset({"column", "to"}), frozenset({"lenient"})),
    "conditional": (frozenset({"if", "then"}), frozenset({"else"})),
    "fallback": (frozenset({"primary", "alternate"}), frozenset()),
    "checkpoint_mark": (frozenset(), frozenset({"label"})),
}


def primitive(name: str, **args) -> dict:
    return {"name": name, "args": args}


def validate_program(program: Sequence[Mapping]) -> None:
    if not program:
        raise ExecutorError("empty program")
    for i, p in enumerate(program):
        name = p.get("name")
        if name not in PRIMITIVES:
            raise PrimitiveFailure(i, f"unknown primitive {name!r}")
        required, optional = ARG_SCHEMA[name]
        args = set(p.get("args", {}))
        if not required <= args:
            raise PrimitiveFailure(i, f"{name} missing args {sorted(required - args)}")
        if args - required - optional:
            raise PrimitiveFailure(i, f"{name} got unexpected args {sorted(args - required - optional)}")
        if name == "conditional":
            validate_program(p["args"]["then"])
            if p["args"].get("else"):
                validate_program(p["args"]["else"])
        if name == "fallback":
            validate_program(p["args"]["primary"])
            validate_program(p["args"]["alternate"])


# ---------------------------------------------------------------------------
# public value types


@dataclass(frozen=True)
class DataHandle:
    id: str
    schema: tuple[tuple[str, SemanticType], ...]
    row_count: int
    lineage_parents: tuple[str, ...] = ()
    primitives: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.schema:
            raise ExecutorError(f"handle {self.id} has an empty schema")

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(c for c, _ in self.schema)

    def to_dict(self) -> dict:
        return {"id": self.id, "schema": [[c, t.value] for c, t in self.schema], "row_count": self.row_count,
                "lineage_parents": list(self.lineage_parents), "primitives": list(self.primitives)}


class SummaryKind(str, enum.Enum):
    SchemaOnly = "SchemaOnly"
    Stats = "Stats"
    SampleRows = "SampleRows"
    GroupBreakdown = "GroupBreakdown"
    Distribution = "Distribution"


@dataclass(frozen=True)
class Summary:
    kind: SummaryKind
    content: Mapping[str, Any]
    source: str
    row_budget: int = 0

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "content": self.content, "source": self.source, "row_budget": self.row_budget}


# ---------------------------------------------------------------------------
# value helpers


def _scalar(v, t: SemanticType | None = None):
    if v is None or v is pd.NA or v is pd.NaT:
        return None
    if isinstance(v, float) and math.isnan(v):
        return None
    if isinstance(v, (pd.Timestamp, datetime)):
        return v.date().isoformat()
    if isinstance(v, date):
        return v.isoformat()
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def parse_cents(text) -> int | None:
    if text is None:
        return None
    s = str(text).strip().replace(",", "")
    if not s:
        return None
    neg = s.startswith("(") and s.endswith(")")
    s = s.strip("()").lstrip("$")
    try:
        d = Decimal(s)
    except InvalidOperation:
        return None
    cents = d * 100
    if cents != cents.to_integral_value():
        return None
    return -int(cents) if neg else int(cents)


def _convert(series: pd.Series, to: SemanticType, lenient: bool = True) -> pd.Series:
    if to is SemanticType.cents:
        vals = [parse_cents(x) if not (x is None or x is pd.NA) else None for x in series]
        if not lenient and any(v is None and x not in (None, "") for v, x in zip(vals, series)):
            raise ValueError("unparseable currency value")
        return pd.Series(vals, index=series.index, dtype="Int64")
    if to is SemanticType.integer:
        return pd.to_numeric(series, errors="coerce" if lenient else "raise").astype("Int64")
    if to is SemanticType.float:
        return pd.to_numeric(series, errors="coerce" if lenient else "raise").astype("Float64")
    if to is SemanticType.date:
        return pd.to_datetime(series, errors="coerce" if lenient else "raise", format="%Y-%m-%d")
    if to is SemanticType.boolean:
        m = {"true": True, "false": False, "1": True, "0": False}
        return pd.Series([m.get(str(x).strip().lower()) if x is not None else None for x in series],
                         index=series.index, dtype="boolean")
    return pd.Series([None if (x is None or x is pd.NA or x == "") else str(x) for x in series],
                     index=series.index, dtype=object)


def _coerce(series: pd.Series, to: SemanticType) -> pd.Series:
    """Give already typed values (cents as ints, dates as timestamps) their dtype."""
    vals = [None if (x is None or x is pd.NA or x is pd.NaT) else x for x in series]
    if any(isinstance(v, str) for v in vals):
        return _convert(pd.Series(vals, index=series.index, dtype=object), to)
    if to is SemanticType.date:
        return pd.to_datetime(pd.Series(vals, index=series.index, dtype=object))
    dtype = {SemanticType.cents: "Int64", SemanticType.integer: "Int64",
             SemanticType.float: "Float64", SemanticType.boolean: "boolean"}.get(to, object)
    return pd.Series(vals, index=series.index, dtype=dtype)


def _empty(t: SemanticType, n: int, index=None) -> pd.Series:
    if t is SemanticType.date:
        return pd.Series([pd.NaT] * n, index=index, dtype="datetime64[ns]")
    dtype = {SemanticType.cents: "Int64", SemanticType.integer: "Int64",
             SemanticType.float: "Float64", SemanticType.boolean: "boolean"}.get(t, object)
    return pd.Series([None] * n, index=index, dtype=dtype)


def _normalize_name(s: str) -> str:
    return " ".join(str(s).casefold().split())


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def similarity(a: str, b: str) -> float:
    """Normalized edit-distance ratio on case-folded, space-collapsed strings."""
    a, b = _normalize_name(a), _normalize_name(b)
    if not a and not b:
        return 1.0
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))


# ---------------------------------------------------------------------------
# working tables


@dataclass
class _Table:
    frame: pd.DataFrame
    types: dict[str, SemanticType]
    # column -> refs it was computed from
    origin: dict[str, frozenset]

    def copy_with(self, frame, types=None, origin=None) -> "_Table":
        return _Table(frame.reset_index(drop=True), dict(types or self.types), dict(origin or self.origin))

    def need(self, *cols):
        for c in cols:
            if c not in self.frame.columns:
                raise UnknownColumn(c)


MATCH_STATUSES = ("MATCHED", "PAYMENT_PENDING", "UNMATCHED")


@dataclass(frozen=True)
class FuzzyRule:
    left_key: str
    right_key: str
    threshold: float = 0.85
    amount_tol: int = 1  # cents
    date_window: int = 7  # days
    left_amount: str = "amount_cents"
    right_amount: str = "amount_cents"
    left_date: str = "invoice_date"
    right_date: str = "payment_date"
    right_id: str = "expense_id"
    recency_horizon: int = 14  # days before period end
    period_end: str | None = None


class Executor:
    """Session-local store of tables, reachable only through handles."""

    def __init__(self, config: Mapping[str, Any] | None = None, sample_budget: int = DEFAULT_SAMPLE_BUDGET):
        self.config = dict(config or {})
        self.sample_budget = sample_budget
        self._tables: dict[str, _Table] = {}
        self._handles: dict[str, DataHandle] = {}
        self._memo: dict[str, str] = {}
        self._prefix: dict[str, _Table] = {}
        self._manifest: list[dict] = []
        self._next = 0
        self.last_edges: list[tuple[str, str]] = []

    # -- loading

    def load_input(self, name: str, frame: pd.DataFrame, types: Mapping[str, str | SemanticType],
                   source: Mapping[str, Any] | None = None) -> DataHandle:
        hid = f"input:{name}"
        types = {c: SemanticType(t) for c, t in types.items()}
        missing = [c for c in frame.columns if c not in types]
        if missing:
            raise ExecutorError(f"input {name} has untyped columns {missing}")
        frame = frame.reset_index(drop=True).copy()
        for c in frame.columns:
            frame[c] = _convert(frame[c].astype(object).where(frame[c].notna(), None), types[c])
        table = _Table(frame, {c: types[c] for c in frame.columns},
                       {c: frozenset({f"{hid}.{c}"}) for c in frame.columns})
        self._tables[hid] = table
        h = DataHandle(hid, tuple((c, types[c]) for c in frame.columns), len(frame))
        self._handles[hid] = h
        self._manifest.append({"id": hid, "kind": "input", "source": dict(source or {}),
                               "types": {c: types[c].value for c in frame.columns}})
        return h

    def load_csv(self, name: str, csv_path: str | Path, schema_path: str | Path) -> DataHandle:
        schema = json.loads(Path(schema_path).read_text())
        types = {c["name"]: c["type"] for c in schema["columns"]}
        frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
        frame = frame.replace({"": None})
        digest = hashlib.sha256(Path(csv_path).read_bytes()).hexdigest()
        return self.load_input(name, frame, types, {"path": str(csv_path), "schema": str(schema_path),
                                                    "sha256": digest})

    # -- access

    def handle(self, hid: str) -> DataHandle:
        try:
            return self._handles[hid]
        except KeyError:
            raise UnknownHandle(hid) from None

    def __contains__(self, hid: str) -> bool:
        return hid in self._handles

    @property
    def handles(self) -> list[DataHandle]:
        return list(self._handles.values())

    def _table(self, hid: str) -> _Table:
        if hid not in self._tables:
            raise UnknownHandle(hid)
        return self._tables[hid]

    # -- execution

    def submit(self, program: Sequence[Mapping], inputs: Sequence[str]) -> DataHandle:
        """Run ``program`` over ``inputs[0]`` (other inputs are addressable by index).

        Identical (program, inputs) pairs return the already computed handle.
        Column lineage edges of a new handle are left in ``last_edges``.
        """
        program = [dict(p) for p in program]
        for hid in inputs:
            self._table(hid)
        if not inputs:
            raise ExecutorError("submit needs at least one input handle")
        validate_program(program)
        key = json.dumps({"p": program, "i": list(inputs)}, sort_keys=True, default=str)
        if key in self._memo:
            self.last_edges = []
            return self._handles[self._memo[key]]
        table = self._run(program, list(inputs), top=True)
        hid = f"h{self._next}"
        self._next += 1
        table.origin = {c: table.origin.get(c, frozenset()) for c in table.frame.columns}
        self._tables[hid] = table
        h = DataHandle(hid, tuple((c, table.types[c]) for c in table.frame.columns), len(table.frame),
                       tuple(dict.fromkeys(inputs)), tuple(p["name"] for p in program))
        self._handles[hid] = h
        self._memo[key] = hid
        self._manifest.append({"id": hid, "kind": "submit", "program": program, "inputs": list(inputs)})
        edges = [(src, hid) for src in dict.fromkeys(inputs)]
        for c in table.frame.columns:
            col = f"{hid}.{c}"
            for src in sorted(table.origin[c]):
                edges.append((src, col))
            edges.append((col, hid))
        self.last_edges = edges
        return h

    def _run(self, program, inputs: list[str], top: bool = False, start: _Table | None = None) -> _Table:
        table = start if start is not None else self._table(inputs[0])
        for i, p in enumerate(program):
            prefix_key = None
            if top:
                prefix_key = json.dumps({"p": program[: i + 1], "i": inputs}, sort_keys=True, default=str)
                cached = self._prefix.get(prefix_key)
                if cached is not None:
                    table = cached
                    continue
            try:
                table = self._apply(p["name"], p.get("args", {}), table, inputs, i)
            except PrimitiveFailure:
                raise
            except UnknownColumn as exc:
                raise PrimitiveFailure(i, f"unknown column {exc.args[0]}") from None
            except (ExecutorError, KeyError, ValueError, TypeError) as exc:
                raise PrimitiveFailure(i, f"{p['name']}: {exc}") from None
            if prefix_key is not None:
                self._prefix[prefix_key] = table
        return table

    def _operand(self, spec, inputs: list[str], i: int) -> _Table:
        """Resolve a right-hand operand: an input index, a handle id, or a sub-program."""
        if isinstance(spec, int):
            return self._table(inputs[spec])
        if isinstance(spec, str):
            return self._table(spec)
        base = spec["input"]
        base_id = inputs[base] if isinstance(base, int) else base
        sub = spec.get("program") or []
        if not sub:
            return self._table(base_id)
        return self._run(sub, inputs, start=self._table(base_id))

    def _value(self, v):
        if isinstance(v, Mapping) and "config" in v:
            key = v["config"]
            if key not in self.config:
                raise ExecutorError(f"unknown config key {key}")
            return self.config[key], frozenset({f"config:{key}"})
        return v, frozenset()

    # -- expressions

    def _expr(self, e, t: _Table, inputs, i):
        """Evaluate an expression to (series, type, origin refs)."""
        n = len(t.frame)
        idx = t.frame.index
        if isinstance(e, str):
            e = {"col": e}
        if "col" in e:
            t.need(e["col"])
            return t.frame[e["col"]], t.types[e["col"]], t.origin[e["col"]]
        if "const" in e:
            val, org = self._value(e["const"])
            typ = SemanticType(e.get("type", "string"))
            s = _coerce(pd.Series([val] * n, index=idx, dtype=object), typ) if typ is not SemanticType.string \
                else pd.Series([val] * n, index=idx, dtype=object)
            return s, typ, org
        if "null" in e:
            typ = SemanticType(e["null"])
            return _empty(typ, n, idx), typ, frozenset()
        if "lower" in e:
            s, _, o = self._expr(e["lower"], t, inputs, i)
            return s.map(lambda x: None if x is None else str(x).lower()), SemanticType.string, o
        if "remove" in e:
            inner, text = e["remove"]
            s, _, o = self._expr(inner, t, inputs, i)
            return s.map(lambda x: None if x is None else str(x).replace(text, "")), SemanticType.string, o
        if "to_cents" in e:
            s, _, o = self._expr(e["to_cents"], t, inputs, i)
            return _convert(s, SemanticType.cents), SemanticType.cents, o
        if "to_date" in e:
            s, _, o = self._expr(e["to_date"], t, inputs, i)
            return _convert(s, SemanticType.date), SemanticType.date, o
        for op in ("add", "sub", "mul"):
            if op in e:
                (s1, t1, o1), (s2, t2, o2) = (self._expr(x, t, inputs, i) for x in e[op])
                out = {"add": s1 + s2, "sub": s1 - s2, "mul": s1 * s2}[op]
                return out, t1 if t1 is t2 else SemanticType.float, o1 | o2
        if "ratio_pct" in e:
            num, den = e["ratio_pct"][:2]
            digits = e["ratio_pct"][2] if len(e["ratio_pct"]) > 2 else 2
            (s1, _, o1), (s2, _, o2) = self._expr(num, t, inputs, i), self._expr(den, t, inputs, i)
            vals = [None if (a is pd.NA or b is pd.NA or b in (0, None)) else round(100.0 * int(a) / int(b), digits)
                    for a, b in zip(s1, s2)]
            return pd.Series(vals, index=idx, dtype="Float64"), SemanticType.float, o1 | o2
        if "nearest" in e:
            spec = e["nearest"]
            s, _, o = self._expr(spec["column"], t, inputs, i)
            ref = self._operand(spec["reference"], inputs, i)
            ref.need(spec["reference_column"])
            choices = sorted({x for x in ref.frame[spec["reference_column"]] if x is not None})
            thr, o_thr = self._value(spec.get("threshold", 0.85))

            def pick(x):
                if x is None:
                    return None
                scored = sorted(((similarity(x, c), c) for c in choices), key=lambda sc: (-sc[0], sc[1]))
                return scored[0][1] if scored and scored[0][0] >= thr else x

            return (s.map(pick).astype(object), SemanticType.string,
                    o | ref.origin[spec["reference_column"]] | o_thr)
        raise ExecutorError(f"unknown expression {sorted(e)}")

    def _where(self, spec, t: _Table):
        if spec is None:
            return pd.Series([True] * len(t.frame), index=t.frame.index), frozenset()
        t.need(spec["column"])
        col = t.frame[spec["column"]]
        if "eq" in spec:
            mask = col.map(lambda x: x == spec["eq"])
        elif "in" in spec:
            allowed = set(spec["in"])
            mask = col.map(lambda x: x in allowed)
        else:
            mask = col.notna()
        return mask.fillna(False).astype(bool), t.origin[spec["column"]]

    def _agg(self, spec, t: _Table, frame=None):
        func, col, where = spec[0], (spec[1] if len(spec) > 1 else None), (spec[2] if len(spec) > 2 else None)
        frame = t.frame if frame is None else frame
        sub_t = _Table(frame, t.types, t.origin)
        mask, o_w = self._where(where, sub_t)
        sel = frame[mask.values]
        origin = set(o_w)
        if col is not None:
            sub_t.need(col)
            origin |= t.origin[col]
            values = sel[col].dropna()
        if func in ("count", "count_where"):
            return len(sel), SemanticType.integer, frozenset(origin or set().union(*t.origin.values()))
        if func in ("sum", "sum_where"):
            typ = t.types[col]
            total = sum(int(v) for v in values) if typ in (SemanticType.cents, SemanticType.integer) \
                else float(sum(values))
            return total, typ, frozenset(origin)
        if func == "min":
            return (_scalar(values.min()) if len(values) else None), t.types[col], frozenset(origin)
        if func == "max":
            return (_scalar(values.max()) if len(values) else None), t.types[col], frozenset(origin)
        if func == "mean":
            return (float(values.astype(float).mean()) if len(values) else None), SemanticType.float, frozenset(origin)
        if func == "distinct_count":
            return int(values.nunique()), SemanticType.integer, frozenset(origin)
        raise ExecutorError(f"unknown aggregate {func}")

    # -- primitives

    def _apply(self, name, a, t: _Table, inputs, i) -> _Table:
        f = t.frame
        if name == "filter":
            col = a["column"]
            t.need(col)
            val, _ = self._value(a.get("value"))
            op = a["op"]
            s = f[col]
            if t.types[col] is SemanticType.date and isinstance(val, str):
                val = pd.Timestamp(val)
            if op == "isnull":
                mask = s.isna()
            elif op == "notnull":
                mask = s.notna()
            elif op == "in":
                mask = s.map(lambda x: x in set(val))
            else:
                cmp = {"eq": "__eq__", "ne": "__ne__", "lt": "__lt__", "le": "__le__", "gt": "__gt__", "ge": "__ge__"}
                if op not in cmp:
                    raise ExecutorError(f"unknown filter op {op}")
                mask = getattr(s, cmp[op])(val)
            mask = pd.Series(mask, index=f.index).fillna(False).astype(bool)
            return t.copy_with(f[mask.values])
        if name == "select":
            t.need(*a["columns"])
            cols = list(a["columns"])
            return _Table(f[cols].reset_index(drop=True), {c: t.types[c] for c in cols},
                          {c: t.origin[c] for c in cols})
        if name == "project":
            out = f.copy()
            types, origin = dict(t.types), dict(t.origin)
            for col, e in a["assign"].items():
                s, typ, o = self._expr(e, t, inputs, i)
                out[col] = s.values if len(s) == len(out) else s
                types[col], origin[col] = typ, o
            for col in a.get("drop", ()):
                t.need(col) if col not in out.columns else None
                out = out.drop(columns=[col])
                types.pop(col, None)
                origin.pop(col, None)
            return _Table(out.reset_index(drop=True), types, origin)
        if name == "join":
            return self._join(a, t, inputs, i)
        if name == "aggregate":
            row, types, origin = {}, {}, {}
            for out_col, spec in a["aggs"].items():
                v, typ, o = self._agg(spec, t)
                row[out_col] = [v]
                types[out_col], origin[out_col] = typ, o
            frame = pd.DataFrame(row)
            for c, typ in types.items():
                frame[c] = _coerce(frame[c].astype(object), typ) if typ is not SemanticType.string else frame[c]
            return _Table(frame, types, origin)
        if name == "group_by":
            by = list(a["by"])
            t.need(*by)
            rows = []
            types = {c: t.types[c] for c in by}
            origin = {c: t.origin[c] for c in by}
            keys = f[by].astype(object).where(f[by].notna(), None)
            groups: dict[tuple, list[int]] = {}
            for pos, key in enumerate(map(tuple, keys.values.tolist())):
                groups.setdefault(key, []).append(pos)
            for key in sorted(groups, key=lambda k: tuple("" if x is None else str(x) for x in k)):
                sub = f.iloc[groups[key]]
                row = dict(zip(by, key))
                for out_col, spec in a["aggs"].items():
                    v, typ, o = self._agg(spec, t, sub)
                    row[out_col] = v
                    types[out_col], origin[out_col] = typ, o
                rows.append(row)
            frame = pd.DataFrame(rows, columns=by + list(a["aggs"]))
            for c in a["aggs"]:
                frame[c] = _coerce(frame[c].astype(object), types.get(c, SemanticType.integer))
            return _Table(frame, types, origin)
        if name == "pivot":
            t.need(a["index"], a["columns"], a["values"])
            agg = a.get("agg", "sum")
            pv = pd.pivot_table(f, index=a["index"], columns=a["columns"], values=a["values"],
                                aggfunc=agg, sort=True).reset_index()
            pv.columns = [str(c) for c in pv.columns]
            vt = t.types[a["values"]] if agg in ("sum", "min", "max") else SemanticType.float
            types = {c: (t.types[a["index"]] if c == a["index"] else vt) for c in pv.columns}
            vo = t.origin[a["values"]] | t.origin[a["columns"]]
            origin = {c: (t.origin[a["index"]] if c == a["index"] else vo) for c in pv.columns}
            for c in pv.columns:
                if c != a["index"] and types[c] in (SemanticType.cents, SemanticType.integer):
                    pv[c] = pv[c].astype("Int64")
            return _Table(pv, types, origin)
        if name == "unpivot":
            ids, vals = list(a["id_vars"]), list(a["value_vars"])
            t.need(*ids, *vals)
            var, value = a.get("var_name", "variable"), a.get("value_name", "value")
            vtypes = {t.types[c] for c in vals}
            if len(vtypes) != 1:
                raise ExecutorError("unpivot needs value columns of one type")
            m = f.melt(id_vars=ids, value_vars=vals, var_name=var, value_name=value)
            types = {**{c: t.types[c] for c in ids}, var: SemanticType.string, value: vtypes.pop()}
            origin = {**{c: t.origin[c] for c in ids}, var: frozenset().union(*(t.origin[c] for c in vals)),
                      value: frozenset().union(*(t.origin[c] for c in vals))}
            return _Table(m.reset_index(drop=True), types, origin)
        if name == "union":
            other = self._operand(a["other"], inputs, i)
            if list(other.frame.columns) != list(f.columns):
                raise ExecutorError("union needs identical schemas")
            out = pd.concat([f, other.frame], ignore_index=True)
            origin = {c: t.origin[c] | other.origin[c] for c in f.columns}
            return _Table(out, dict(t.types), origin)
        if name == "difference":
            other = self._operand(a["other"], inputs, i)
            on = list(a.get("on") or f.columns)
            t.need(*on)
            theirs = {tuple(_scalar(x) for x in r) for r in other.frame[on].itertuples(index=False)}
            keep = [tuple(_scalar(x) for x in r) not in theirs for r in f[on].itertuples(index=False)]
            origin = {c: t.origin[c] | frozenset().union(*(other.origin[k] for k in on)) for c in f.columns}
            return _Table(f[keep].reset_index(drop=True), dict(t.types), origin)
        if name == "distinct":
            cols = list(a.get("columns") or f.columns)
            t.need(*cols)
            return t.copy_with(f.drop_duplicates(subset=cols, keep="first"))
        if name == "sort":
            by = list(a["by"])
            t.need(*by)
            return t.copy_with(f.sort_values(by, ascending=not a.get("descending", False),
                                             kind="mergesort", na_position="last"))
        if name == "limit":
            n = int(a["n"])
            if n < 0:
                raise ExecutorError("limit must be non-negative")
            return t.copy_with(f.head(n))
        if name == "window":
            return self._window(a, t)
        if name == "type_convert":
            col = a["column"]
            t.need(col)
            to = SemanticType(a["to"])
            raw = f[col].astype(object).where(f[col].notna(), None)
            if t.types[col] is SemanticType.date and to is SemanticType.string:
                raw = raw.map(lambda x: None if x is None else pd.Timestamp(x).date().isoformat())
            out = f.copy()
            out[col] = _convert(raw, to, lenient=a.get("lenient", True))
            types = dict(t.types)
            types[col] = to
            return _Table(out, types, dict(t.origin))
        if name == "conditional":
            cond = a["if"]
            if "column_exists" in cond:
                ok = cond["column_exists"] in f.columns
            elif "row_count_gt" in cond:
                ok = len(f) > cond["row_count_gt"]
            else:
                raise ExecutorError(f"unknown condition {sorted(cond)}")
            branch = a["then"] if ok else (a.get("else") or [])
            return self._run(branch, inputs, start=t) if branch else t
        if name == "fallback":
            try:
                return self._run(a["primary"], inputs, start=t)
            except PrimitiveFailure:
                return self._run(a["alternate"], inputs, start=t)
        if name == "checkpoint_mark":
            return t
        raise PrimitiveFailure(i, f"unknown primitive {name}")

    def _window(self, a, t: _Table) -> _Table:
        f = t.frame.copy()
        func, out = a["func"], a["out"]
        part = list(a.get("partition_by") or [])
        order = list(a.get("order_by") or [])
        t.need(*part, *order)
        col = a.get("column")
        if col is not None:
            t.need(col)
        work = f.sort_values(order, kind="mergesort") if order else f
        groups = work.groupby(part, sort=False, dropna=False) if part else None
        if func == "row_number":
            res = (groups.cumcount() + 1) if groups is not None else pd.Series(range(1, len(work) + 1), index=work.index)
            typ = SemanticType.integer
        elif func == "cumsum":
            res = groups[col].cumsum() if groups is not None else work[col].cumsum()
            typ = t.types[col]
        elif func == "rank":
            res = (groups[col].rank(method="min") if groups is not None else work[col].rank(method="min"))
            typ = SemanticType.integer
        elif func in ("lag", "lead"):
            k = int(a.get("offset", 1)) * (1 if func == "lag" else -1)
            res = groups[col].shift(k) if groups is not None else work[col].shift(k)
            typ = t.types[col]
        else:
            raise ExecutorError(f"unknown window function {func}")
        f[out] = res.reindex(f.index)
        if typ in (SemanticType.integer, SemanticType.cents):
            f[out] = f[out].astype("Int64")
        types = dict(t.types)
        types[out] = typ
        origin = dict(t.origin)
        src = frozenset().union(*(t.origin[c] for c in part + order + ([col] if col else [])))
        origin[out] = src or frozenset().union(*t.origin.values())
        return _Table(f.reset_index(drop=True), types, origin)

    def _join(self, a, t: _Table, inputs, i) -> _Table:
        right = self._operand(a["right"], inputs, i)
        how = a["how"]
        f, g = t.frame, right.frame
        if how == "fuzzy":
            spec = dict(a.get("fuzzy") or {})
            resolved, extra = {}, frozenset()
            for k, v in spec.items():
                val, o = self._value(v)
                resolved[k] = val
                extra |= o
            rule = FuzzyRule(**resolved)
            return _fuzzy(t, right, rule, extra)
        if how == "cross":
            out = f.merge(g, how="cross", suffixes=("", "_right"))
        else:
            lo, ro = a.get("left_on"), a.get("right_on")
            lo = [lo] if isinstance(lo, str) else list(lo or [])
            ro = [ro] if isinstance(ro, str) else list(ro or lo)
            t.need(*lo)
            right.need(*ro)
            if how == "anti":
                theirs = {tuple(_scalar(x) for x in r) for r in g[ro].itertuples(index=False)}
                keep = [tuple(_scalar(x) for x in r) not in theirs for r in f[lo].itertuples(index=False)]
                org = frozenset().union(*(right.origin[c] for c in ro))
                return _Table(f[keep].reset_index(drop=True), dict(t.types),
                              {c: t.origin[c] | org for c in f.columns})
            if how not in ("inner", "left", "outer"):
                raise ExecutorError(f"unknown join kind {how}")
            out = f.merge(g, how=how, left_on=lo, right_on=ro, suffixes=("", "_right"), sort=False)
        types, origin = dict(t.types), dict(t.origin)
        for c in g.columns:
            name = c if c not in f.columns else f"{c}_right"
            if name in out.columns and name not in types:
                types[name] = right.types[c]
                origin[name] = right.origin[c]
        return _Table(out.reset_index(drop=True), types, origin)

    # -- summaries

    def summarize(self, hid: str, kind: SummaryKind | str, **params) -> Summary:
        kind = SummaryKind(kind)
        t = self._table(hid)
        f = t.frame
        if kind is SummaryKind.SchemaOnly:
            return Summary(kind, {"columns": [[c, t.types[c].value] for c in f.columns], "row_count": len(f)}, hid)
        if kind is SummaryKind.Stats:
            cols = list(params.get("columns") or f.columns)
            t.need(*cols)
            stats = {}
            for c in cols:
                s = f[c].dropna()
                typ = t.types[c]
                entry = {"count": int(len(s)), "distinct": int(s.nunique()),
                         "min": _scalar(s.min()) if len(s) else None,
                         "max": _scalar(s.max()) if len(s) else None,
                         "mean": float(s.astype(float).mean()) if len(s) and typ in _NUMERIC else None}
                stats[c] = entry
            return Summary(kind, {"row_count": len(f), "columns": stats}, hid)
        if kind is SummaryKind.SampleRows:
            n = int(params.get("n", 5))
            if n > self.sample_budget:
                raise BudgetExceeded(f"{n} rows requested, budget is {self.sample_budget}")
            rows = [{c: _scalar(v) for c, v in zip(f.columns, r)} for r in f.head(n).itertuples(index=False)]
            return Summary(kind, {"rows": rows}, hid, row_budget=self.sample_budget)
        if kind is SummaryKind.GroupBreakdown:
            by = params["by"]
            t.need(by)
            value = params.get("value")
            if value is not None:
                t.need(value)
            groups: dict = {}
            for pos, key in enumerate(f[by]):
                groups.setdefault(_scalar(key), []).append(pos)
            out = []
            for key in sorted(groups, key=lambda k: (k is None, "" if k is None else str(k))):
                entry = {"group": key, "count": len(groups[key])}
                if value is not None:
                    vals = f[value].iloc[groups[key]].dropna()
                    entry["sum"] = _scalar(vals.sum()) if len(vals) else 0
                out.append(entry)
            return Summary(kind, {"by": by, "groups": out}, hid)
        if kind is SummaryKind.Distribution:
            col = params["column"]
            t.need(col)
            buckets = int(params.get("buckets", 4))
            if buckets < 1:
                raise ExecutorError("need at least one bucket")
            vals = f[col].dropna().astype(float).to_numpy()
            if len(vals):
                counts, edges = np.histogram(vals, bins=buckets, range=(vals.min(), vals.max()))
            else:
                counts, edges = np.zeros(buckets, dtype=int), np.zeros(buckets + 1)
            return Summary(kind, {"column": col, "edges": [float(x) for x in edges],
                                  "counts": [int(x) for x in counts], "nulls": int(f[col].isna().sum())}, hid)
        raise ExecutorError(f"unknown summary kind {kind}")

    # -- checkpoint support

    def manifest(self) -> list[dict]:
        return [dict(m) for m in self._manifest]

    @classmethod
    def from_manifest(cls, manifest: Sequence[Mapping], loader: Callable[[Mapping], Any],
                      config: Mapping | None = None, sample_budget: int = DEFAULT_SAMPLE_BUDGET) -> "Executor":
        """Rebuild a store by reloading inputs through ``loader`` and replaying submits."""
        ex = cls(config, sample_budget)
        for m in manifest:
            if m["kind"] == "input":
                loader(ex, m)
            else:
                h = ex.submit(m["program"], m["inputs"])
                if h.id != m["id"]:
                    raise ExecutorError(f"replayed handle {h.id} != recorded {m['id']}")
        return ex


def _fuzzy(left: _Table, right: _Table, rule: FuzzyRule, config_refs: frozenset) -> _Table:
    left.need(rule.left_key, rule.left_amount, rule.left_date)
    right.need(rule.right_key, rule.right_amount, rule.right_date, rule.right_id)
    lf, rf = left.frame, right.frame
    period_end = pd.Timestamp(rule.period_end) if rule.period_end else None
    used: set[int] = set()
    matched_ids, sims, statuses = [], [], []
    rkeys = [None if x is None else str(x) for x in rf[rule.right_key]]
    ramts = list(rf[rule.right_amount])
    rdates = list(rf[rule.right_date])
    for lk, la, ld in zip(lf[rule.left_key], lf[rule.left_amount], lf[rule.left_date]):
        best = None
        if lk is not None and la is not pd.NA and ld is not pd.NaT and not pd.isna(ld):
            for j, (rk, ra, rd) in enumerate(zip(rkeys, ramts, rdates)):
                if j in used or rk is None or ra is pd.NA or pd.isna(rd):
                    continue
                if abs(int(la) - int(ra)) > rule.amount_tol:
                    continue
                gap = abs((rd - ld).days)
                if gap > rule.date_window:
                    continue
                sim = similarity(lk, rk)
                if sim < rule.threshold:
                    continue
                cand = (-sim, gap, j)
                if best is None or cand < best:
                    best = cand
        if best is not None:
            j = best[2]
            used.add(j)
            matched_ids.append(_scalar(rf[rule.right_id].iloc[j]))
            sims.append(round(-best[0], 4))
            statuses.append("MATCHED")
        else:
            matched_ids.append(None)
            sims.append(None)
            pending = (period_end is not None and ld is not pd.NaT and not pd.isna(ld)
                       and 0 <= (period_end - ld).days <= rule.recency_horizon)
            statuses.append("PAYMENT_PENDING" if pending else "UNMATCHED")
    out = lf.copy()
    out["matched_id"] = pd.Series(matched_ids, index=out.index, dtype=object)
    out["name_similarity"] = pd.Series(sims, index=out.index, dtype="Float64")
    out["match_status"] = pd.Series(statuses, index=out.index, dtype=object)
    lo = left.origin
    key_o = lo[rule.left_key] | right.origin[rule.right_key]
    amt_o = lo[rule.left_amount] | right.origin[rule.right_amount]
    date_o = lo[rule.left_date] | right.origin[rule.right_date]
    types = dict(left.types)
    types.update(matched_id=right.types[rule.right_id], name_similarity=SemanticType.float,
                 match_status=SemanticType.string)
    origin = dict(lo)
    origin["matched_id"] = key_o | amt_o | date_o | right.origin[rule.right_id] | config_refs
    origin["name_similarity"] = key_o
    origin["match_status"] = key_o | amt_o | date_o | config_refs
    return _Table(out.reset_index(drop=True), types, origin)


def fuzzy_match(executor: Executor, left: str, right: str, left_key: str, right_key: str,
                threshold: float = 0.85, amount_tol: int = 1, date_window: int = 7, **kw) -> DataHandle:
    """Classify each left row as MATCHED, PAYMENT_PENDING or UNMATCHED against ``right``."""
    for hid in (left, right):
        executor.handle(hid)
    rule = {"left_key": left_key, "right_key": right_key, "threshold": threshold,
            "amount_tol": amount_tol, "date_window": date_window, **kw}
    try:
        return executor.submit([primitive("join", right=1, how="fuzzy", fuzzy=rule)], [left, right])
    except PrimitiveFailure as exc:
        if exc.reason.startswith("unknown column"):
            raise UnknownColumn(exc.reason.split()[-1]) from None
        raise
