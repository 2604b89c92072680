"""The Q1 2025 financial reconciliation fixture.

Three vendors' invoices (pre-extracted from PDFs as text columns) are matched
against the expense ledger. Writers emit executor programs; a defect swaps in
the flawed variant of the program, so critics see its consequences only
through executor summaries.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import yaml

from .agents import register_skill
from .executor import primitive as P
from .model import DefectKind, StepKind
from .orchestrator import InvalidConfig, Mode, Session, SessionConfig
from .plan import (
    AcceptanceCriterion,
    ApprovalPolicy,
    PlanStep,
    Query,
    field_present,
    policy,
    register_template,
    row_count_bound,
    schema_match,
)

TASK = "financial-reconciliation"
SCENARIOS = {"financial-q1": "financial_q1"}
INPUT_TABLES = ("healthcare", "telecom", "cloud", "expenses")
INVOICE_FIELDS = ("vendor", "invoice_number", "invoice_date", "amount_cents")
EXPENSE_FIELDS = ("expense_id", "payee", "payment_date", "amount_cents")
RESULT_FIELDS = ("invoice_count", "matched_count", "matched_total_cents", "pending_count",
                 "pending_total_cents", "unmatched_expense_cents", "match_rate_pct", "discrepancy_cents")

# reconciliation parameters; the executor resolves {"config": key} against these
EXECUTOR_DEFAULTS = {
    "name_threshold": 0.85,
    "amount_tolerance_cents": 1,
    "date_window_days": 7,
    "recency_horizon_days": 14,
    "period_start": "2025-01-01",
    "period_end": "2025-03-31",
}


class FixtureMissing(FileNotFoundError):
    pass


def fixture_dir(name: str = "financial-q1") -> Path:
    if name not in SCENARIOS:
        raise FixtureMissing(f"unknown scenario {name!r}")
    path = Path(str(resources.files("rivals").joinpath("data", SCENARIOS[name])))
    if not path.is_dir():
        raise FixtureMissing(str(path))
    return path


def fixture_inputs(name: str = "financial-q1") -> dict[str, dict[str, str]]:
    root = fixture_dir(name)
    out = {}
    for table in INPUT_TABLES:
        csv, schema = root / f"{table}.csv", root / f"{table}.schema.json"
        if not csv.exists() or not schema.exists():
            raise FixtureMissing(str(csv))
        out[table] = {"csv": str(csv), "schema": str(schema)}
    return out


# ---------------------------------------------------------------------------
# writer skills: (step, defects) -> (program, declared fields)


def _has(defects, kind: DefectKind) -> bool:
    return any(d.kind is kind for d in defects)


def _broken(fields) -> tuple:
    # a code defect with no scripted failure mode: reference a column that does not exist
    return (P("select", columns=["__missing__"]),), tuple(fields)


def _extract(mapping: Mapping[str, dict], flawed: Mapping[str, dict], order: Sequence[str]):
    def skill(step, defects):
        assign = dict(mapping)
        if _has(defects, DefectKind.CodeDefect):
            assign.update(flawed)
        program = (P("project", assign=assign), P("select", columns=list(order)))
        return program, tuple(order)
    return skill


# healthcare PDFs: the invoice number sits in a header block the first parser misses
register_skill("fin.extract.healthcare")(_extract(
    {"vendor": {"col": "vendor_name"}, "invoice_number": {"col": "invoice_number"},
     "invoice_date": {"to_date": {"col": "invoice_date"}}, "amount_cents": {"to_cents": {"col": "total_amount"}}},
    {"invoice_number": {"null": "string"}}, INVOICE_FIELDS))

# telecom bills label the date "date_of_issue"
register_skill("fin.extract.telecom")(_extract(
    {"vendor": {"col": "provider"}, "invoice_number": {"col": "bill_id"},
     "invoice_date": {"to_date": {"col": "date_of_issue"}}, "amount_cents": {"to_cents": {"col": "amount_due"}}},
    {"invoice_date": {"null": "date"}}, INVOICE_FIELDS))

# cloud invoices prefix totals with the currency code
register_skill("fin.extract.cloud")(_extract(
    {"vendor": {"col": "account_name"}, "invoice_number": {"col": "invoice_id"},
     "invoice_date": {"to_date": {"col": "issued_on"}},
     "amount_cents": {"to_cents": {"remove": [{"col": "total_in_usd"}, "USD "]}}},
    {"amount_cents": {"to_cents": {"col": "total_in_usd"}}}, INVOICE_FIELDS))

register_skill("fin.extract.expenses")(_extract(
    {"expense_id": {"col": "expense_id"}, "payee": {"col": "payee"},
     "payment_date": {"to_date": {"col": "payment_date"}}, "amount_cents": {"to_cents": {"col": "amount"}}},
    {"amount_cents": {"null": "cents"}}, EXPENSE_FIELDS))


@register_skill("fin.consolidate")
def _consolidate(step, defects):
    if _has(defects, DefectKind.CodeDefect):
        return _broken(INVOICE_FIELDS)
    return (P("union", other=1), P("union", other=2),
            P("distinct", columns=["vendor", "invoice_number"]),
            P("sort", by=["invoice_date", "vendor"])), INVOICE_FIELDS


@register_skill("fin.standardize")
def _standardize(step, defects):
    if _has(defects, DefectKind.CodeDefect):
        return _broken(INVOICE_FIELDS)
    canon = {"nearest": {"column": {"col": "vendor"}, "reference": 1, "reference_column": "payee",
                         "threshold": {"config": "name_threshold"}}}
    return (P("project", assign={"vendor": canon}),
            P("filter", column="invoice_date", op="ge", value={"config": "period_start"}),
            P("filter", column="invoice_date", op="le", value={"config": "period_end"})), INVOICE_FIELDS


@register_skill("fin.reconcile")
def _reconcile(step, defects):
    fields = INVOICE_FIELDS + ("matched_id", "name_similarity", "match_status")
    if _has(defects, DefectKind.CodeDefect):
        return _broken(fields)
    rule = {"left_key": "vendor", "right_key": "payee",
            "threshold": {"config": "name_threshold"},
            "amount_tol": {"config": "amount_tolerance_cents"},
            "date_window": {"config": "date_window_days"},
            "left_amount": "amount_cents", "right_amount": "amount_cents",
            "left_date": "invoice_date", "right_date": "payment_date", "right_id": "expense_id",
            "recency_horizon": {"config": "recency_horizon_days"},
            "period_end": {"config": "period_end"}}
    return (P("join", right=1, how="fuzzy", fuzzy=rule),), fields


@register_skill("fin.synthesize")
def _synthesize(step, defects):
    if _has(defects, DefectKind.CodeDefect):
        return _broken(RESULT_FIELDS)
    matched = {"column": "match_status", "eq": "MATCHED"}
    pending = {"column": "match_status", "eq": "PAYMENT_PENDING"}
    unexplained = {"input": 1, "program": [
        P("join", right=0, how="anti", left_on="expense_id", right_on="matched_id"),
        P("aggregate", aggs={"unmatched_expense_cents": ["sum", "amount_cents"]}),
    ]}
    # misreading the request: report pending invoices net of unexplained spend
    discrepancy = ({"sub": [{"col": "pending_total_cents"}, {"col": "unmatched_expense_cents"}]}
                   if _has(defects, DefectKind.IntentDefect) else {"col": "unmatched_expense_cents"})
    return (
        P("aggregate", aggs={
            "invoice_count": ["count"],
            "matched_count": ["count_where", None, matched],
            "matched_total_cents": ["sum_where", "amount_cents", matched],
            "pending_count": ["count_where", None, pending],
            "pending_total_cents": ["sum_where", "amount_cents", pending],
        }),
        P("join", right=unexplained, how="cross"),
        P("project", assign={"match_rate_pct": {"ratio_pct": [{"col": "matched_count"}, {"col": "invoice_count"}, 2]},
                             "discrepancy_cents": discrepancy}),
    ), RESULT_FIELDS


# ---------------------------------------------------------------------------
# plan template


def _criteria(step_id: int, fields: Sequence[str], *, rows: tuple[int, int | None] = (1, None)):
    return [
        AcceptanceCriterion(f"s{step_id}.executed", f"step {step_id} program ran without failure", policy("executed")),
        AcceptanceCriterion(f"s{step_id}.fields", f"step {step_id} exposes populated {', '.join(fields)}",
                            field_present(*fields)),
        AcceptanceCriterion(f"s{step_id}.rows", f"step {step_id} row count in {rows}", row_count_bound(*rows)),
    ]


@register_template(TASK)
def financial_plan(query: Query):
    spec = [
        (1, StepKind.Extract, (), "fin.extract.healthcare", "extract healthcare invoices",
         ["input:healthcare"], INVOICE_FIELDS, "extract-healthcare"),
        (2, StepKind.Extract, (), "fin.extract.telecom", "extract telecom invoices",
         ["input:telecom"], INVOICE_FIELDS, "extract-telecom"),
        (3, StepKind.Extract, (), "fin.extract.cloud", "extract cloud invoices",
         ["input:cloud"], INVOICE_FIELDS, "extract-cloud"),
        (4, StepKind.Extract, (), "fin.extract.expenses", "extract expense ledger",
         ["input:expenses"], EXPENSE_FIELDS, "extract-expenses"),
        (5, StepKind.Transform, (1, 2, 3), "fin.consolidate", "consolidate invoices",
         [1, 2, 3], INVOICE_FIELDS, "consolidate"),
        (6, StepKind.Transform, (4, 5), "fin.standardize", "standardize vendor names",
         [5, 4], INVOICE_FIELDS, "standardize"),
        (7, StepKind.Reconcile, (6,), "fin.reconcile", "fuzzy-match invoices to expenses",
         [6, 4], ("match_status",), "reconcile"),
        (8, StepKind.Synthesize, (7,), "fin.synthesize", "summarize reconciliation",
         [7, 4], RESULT_FIELDS, "synthesize"),
    ]
    steps, criteria = [], []
    for sid, kind, deps, skill, label, inputs, fields, prof in spec:
        crit = _criteria(sid, fields, rows=(1, 1) if kind is StepKind.Synthesize else (1, None))
        if sid == 5:
            crit.append(AcceptanceCriterion("s5.schema", "consolidated invoices share one schema",
                                            schema_match(*INVOICE_FIELDS)))
        criteria += crit
        steps.append(PlanStep(sid, kind, deps, "python", tuple(c.id for c in crit),
                              params={"skill": skill, "label": label, "inputs": inputs, "profile": prof}))
    criteria += [
        AcceptanceCriterion("plan.executed", "final summary was computed", policy("executed")),
        AcceptanceCriterion("plan.results", "final summary reports every reconciliation figure",
                            field_present(*RESULT_FIELDS)),
    ]
    return steps, criteria, ["plan.executed", "plan.results"]


def query(name: str = "financial-q1") -> Query:
    return Query(TASK, {"period": "2025-Q1", "scenario": name})


# ---------------------------------------------------------------------------
# configs


def load_config(name: str) -> dict:
    """Packaged YAML config by stem (e.g. ``scenario``, ``comparative``, ``calibrated``)."""
    res = resources.files("rivals").joinpath("data", "configs", f"{name}.yaml")
    if not res.is_file():
        raise InvalidConfig(f"no packaged config named {name!r}")
    return yaml.safe_load(res.read_text())


def read_config(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"malformed config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise InvalidConfig(f"config {path} must be a mapping")
    return data


def scenario_config(raw: Mapping | None = None, mode: Mode | str | None = None, **overrides) -> SessionConfig:
    d = dict(raw if raw is not None else load_config("scenario"))
    d["executor"] = {**EXECUTOR_DEFAULTS, **(d.get("executor") or {})}
    if mode is not None:
        d["mode"] = Mode(mode).value
    d.update(overrides)
    return SessionConfig.from_dict(d)


def run_scenario(name: str = "financial-q1", seed: int = 0, config: SessionConfig | Mapping | None = None,
                 policy: ApprovalPolicy | None = None, mode: Mode | str | None = None, **kw) -> Session:
    if not isinstance(config, SessionConfig):
        config = scenario_config(config, mode)
    elif mode is not None:
        config = SessionConfig.from_dict({**config.source, "mode": Mode(mode).value,
                                          "executor": dict(config.executor)})
    sess = Session(query(name), config, seed, policy=policy, inputs=fixture_inputs(name),
                   session_id=name, **kw)
    return sess.run()


def iterations(sess: Session) -> dict[int, int]:
    """Critique rounds per step, counted from the session log."""
    out: dict[int, set] = {}
    for ev in sess.log:
        if ev.kind.value == "VerdictIssued" and "producer" in ev.payload:
            ref = ev.payload["artifact"]
            sid = int(ref[len("artifact:s"):].split("/")[0])
            out.setdefault(sid, set()).add(ref)
    return {sid: len(refs) for sid, refs in sorted(out.items())}
