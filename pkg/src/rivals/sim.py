"""Monte Carlo cohorts, recovery cost ledgers and architecture comparisons.

Every statistic here is read back from session event logs; nothing is computed
from the closed-form cascade except the reference value it is compared with.
"""
from __future__ import annotations

import enum
import json
import math
import random
import statistics
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import yaml

from .cascade import CascadeModel, expected_escape_rate
from .model import ControlPayload, Decision, Layer, StepKind
from .orchestrator import InvalidConfig, Mode, Session, SessionConfig, UserVerdict
from .plan import AcceptanceCriterion, PlanStep, PlannerProfile, Query, policy, register_template
from .session import EventKind, SessionLog

COHORT_TASK = "cohort-chart"
MAX_SESSIONS = 1_000_000


# ---------------------------------------------------------------------------
# outcomes


class RecoveryLevel(str, enum.Enum):
    L1 = "L1"  # 1-2 extra iterations
    L2 = "L2"  # 3-5
    L3 = "L3"  # 6+

    @classmethod
    def of(cls, extra: int) -> "RecoveryLevel | None":
        if extra <= 0:
            return None
        if extra <= 2:
            return cls.L1
        if extra <= 5:
            return cls.L2
        return cls.L3


LEVEL_LABELS = {RecoveryLevel.L1: "Level 1 (1-2 extra)", RecoveryLevel.L2: "Level 2 (3-5 extra)",
                RecoveryLevel.L3: "Level 3 (6+ extra)"}


@dataclass(frozen=True)
class SessionOutcome:
    first_pass: bool
    inner_caught: bool
    inner_caught_by: str | None
    outer_caught: bool
    user_verdict: UserVerdict
    extra_iterations: int
    credits_total: float
    credits_recovery: float
    time_total: float
    time_recovery: float
    planned: bool = True

    def __post_init__(self):
        if self.first_pass and self.extra_iterations:
            raise ValueError("a first-pass session has no extra iterations")
        if self.credits_recovery > self.credits_total + 1e-9:
            raise ValueError("recovery credits exceed the total")

    @property
    def level(self) -> RecoveryLevel | None:
        return RecoveryLevel.of(self.extra_iterations)


def outcome_from_log(log: Iterable) -> SessionOutcome:
    """Classify one session purely from its event log."""
    inner = outer = False
    inner_by = None
    verdict = None
    planned = True
    produced = 0
    steps: set[int] = set()
    ct = cr = tt = tr = 0.0
    for ev in log:
        kind = ev.kind
        if kind is EventKind.CostIncurred:
            ct += ev.credits
            tt += ev.wall_time
            if ev.payload["recovery"]:
                cr += ev.credits
                tr += ev.wall_time
        elif kind is EventKind.VerdictIssued:
            v = ev.payload.get("verdict")
            if v is not None and v.decision is Decision.Reject:
                if v.layer is Layer.L2Output:
                    outer = True
                elif not inner:
                    inner = True
                    inner_by = "Code" if v.layer is Layer.L1Code else "Chart"
        elif kind is EventKind.ArtifactProduced:
            produced += 1
            steps.add(ev.payload["artifact"].step_id)
        elif kind is EventKind.EscalationRaised:
            verdict = ev.payload["user_verdict"]
            planned = ev.payload.get("planned", True)
        elif kind is EventKind.MessageSent:
            p = ev.payload["envelope"].payload
            if type(p) is ControlPayload and p.action == "user_verdict":
                verdict = p.detail["verdict"]
    if verdict is None:
        raise ValueError("session log has no user verdict; was the session finished?")
    verdict = UserVerdict(verdict)
    extra = max(0, produced - len(steps))
    first = planned and not inner and not outer and verdict is UserVerdict.Approved and extra == 0
    return SessionOutcome(first, inner, inner_by, outer, verdict, extra, ct, cr, tt, tr, planned)


# ---------------------------------------------------------------------------
# cohort configuration


@register_template(COHORT_TASK)
def _cohort_plan(query: Query):
    crit = [AcceptanceCriterion("chart.executed", "chart code ran", policy("executed")),
            AcceptanceCriterion("chart.nonempty", "chart has data", policy("nonempty"))]
    step = PlanStep(1, StepKind.Chart, (), "chart", ("chart.executed", "chart.nonempty"),
                    params={"fields": ["x", "y"], "label": "analysis chart", "rows": 12})
    final = AcceptanceCriterion("answer.executed", "final answer produced", policy("executed"))
    return [step], crit + [final], ["answer.executed"]


def _prob(v, name: str) -> float:
    try:
        x = float(Fraction(str(v))) if isinstance(v, str) else float(v)
    except (ValueError, ZeroDivisionError):
        raise InvalidConfig(f"{name}: {v!r} is not a number") from None
    if not 0.0 <= x <= 1.0 or math.isnan(x):
        raise InvalidConfig(f"{name} must be a probability, got {v!r}")
    return x


@dataclass(frozen=True)
class CohortConfig:
    session: SessionConfig
    model: CascadeModel | None
    replan_rate: float = 0.0
    sessions: int = 522
    seed: int = 0
    raw: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "CohortConfig":
        if not isinstance(raw, Mapping):
            raise InvalidConfig("config must be a mapping")
        d = dict(raw)
        model = None
        casc = d.get("cascade")
        if casc is not None:
            if not isinstance(casc, Mapping):
                raise InvalidConfig("cascade must be a mapping")
            allowed = {"p_error", "p_catch_inner", "p_catch_outer", "code_share", "repair_persistence",
                       "writer_cost", "critic_cost"}
            if set(casc) - allowed:
                raise InvalidConfig(f"unknown cascade keys {sorted(set(casc) - allowed)}")
            for key in ("p_error", "p_catch_inner", "p_catch_outer"):
                if key not in casc:
                    raise InvalidConfig(f"cascade.{key} is required")
            model = CascadeModel(*(_prob(casc[k], f"cascade.{k}") for k in ("p_error", "p_catch_inner",
                                                                            "p_catch_outer")))
            share = _prob(casc.get("code_share", 1.0), "cascade.code_share")
            keep = _prob(casc.get("repair_persistence", 0.5), "cascade.repair_persistence")
            wc = dict(casc.get("writer_cost") or {"cost_per_call": 1.0, "time_per_call": 1.0})
            cc = dict(casc.get("critic_cost") or {"cost_per_call": 1.0, "time_per_call": 1.0})
            inner = model.p_catch_inner
            mix = {"CodeDefect": inner * share, "ChartDefect": inner * (1 - share), "IntentDefect": 1 - inner}
            mix = {k: v for k, v in mix.items() if v > 0} or {"CodeDefect": 1.0}
            d["writers"] = {"default": {"error_rate": model.p_error, "defect_mix": mix, "repair_factor": keep, **wc}}
            d["critics"] = {
                "CodeCritic": {"detectable_given_layer": {"InnerCritique": 1.0}, **cc},
                "ChartCritic": {"detectable_given_layer": {"InnerCritique": 1.0}, **cc},
                "OutputCritic": {"detectable_given_layer": {"OuterCritique": model.p_catch_outer}, **cc},
            }
        d.setdefault("checkpoints", False)
        d.pop("cascade", None)
        sessions = d.get("sessions", 522)
        seed = d.get("seed", 0)
        if not isinstance(sessions, int) or not 1 <= sessions <= MAX_SESSIONS:
            raise InvalidConfig(f"sessions must be an integer in [1, {MAX_SESSIONS}]")
        if not isinstance(seed, int):
            raise InvalidConfig("seed must be an integer")
        replan = _prob(d.get("replan_rate", 0.0), "replan_rate")
        try:
            sess = SessionConfig.from_dict(d)
        except (ValueError, TypeError) as exc:
            raise InvalidConfig(str(exc)) from None
        return cls(sess, model, replan, sessions, seed, dict(raw))


def load_cohort_config(path_or_name: str | Path) -> CohortConfig:
    p = Path(path_or_name)
    if p.exists():
        try:
            raw = yaml.safe_load(p.read_text())
        except yaml.YAMLError as exc:
            raise InvalidConfig(f"malformed config {p}: {exc}") from None
    else:
        res = resources.files("rivals").joinpath("data", "configs", f"{path_or_name}.yaml")
        if not res.is_file():
            raise InvalidConfig(f"no config file or packaged config named {path_or_name!s}")
        raw = yaml.safe_load(res.read_text())
    return CohortConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# cohorts


def session_seed(seed: int, index: int) -> int:
    return seed * MAX_SESSIONS + index


def cohort_session(cfg: CohortConfig, seed: int, index: int, track_lineage: bool = False) -> Session:
    s = session_seed(seed, index)
    flags = frozenset()
    if cfg.replan_rate and random.Random(f"replan/{s}").random() < cfg.replan_rate:
        flags = frozenset({"missing_inputs"})
    q = Query(COHORT_TASK, {"session": index}, flags)
    planner = PlannerProfile(max_retries=cfg.session.max_retries)
    return Session(q, cfg.session, s, session_id=f"cohort-{seed}-{index}", track_lineage=track_lineage,
                   planner=planner)


@dataclass(frozen=True)
class Funnel:
    sessions: int
    executed: int
    replan: int
    first_pass: int
    errors: int
    inner_caught: int
    inner_code: int
    inner_chart: int
    outer_caught: int
    user_rejected: int

    @property
    def rates(self) -> dict[str, float]:
        ex = self.executed or 1
        escaped = self.errors - self.inner_caught
        return {
            "first_pass": self.first_pass / ex,
            "inner_catch": self.inner_caught / self.errors if self.errors else 0.0,
            "outer_catch": self.outer_caught / escaped if escaped else 0.0,
            "residual": self.user_rejected / ex,
            "replan": self.replan / self.sessions,
        }

    @classmethod
    def of(cls, outcomes: Sequence[SessionOutcome]) -> "Funnel":
        ex = [o for o in outcomes if o.planned]
        errors = [o for o in ex if not o.first_pass]
        inner = [o for o in errors if o.inner_caught]
        return cls(
            sessions=len(outcomes), executed=len(ex), replan=len(outcomes) - len(ex),
            first_pass=len(ex) - len(errors), errors=len(errors), inner_caught=len(inner),
            inner_code=sum(o.inner_caught_by == "Code" for o in inner),
            inner_chart=sum(o.inner_caught_by == "Chart" for o in inner),
            outer_caught=sum(o.outer_caught and not o.inner_caught for o in errors),
            user_rejected=sum(o.user_verdict is UserVerdict.Rejected for o in ex),
        )


@dataclass
class CohortResult:
    seed: int
    outcomes: list[SessionOutcome]
    funnel: Funnel
    expected_escape: float | None
    logs: list[SessionLog] = field(default_factory=list, repr=False)

    def report(self) -> dict:
        out = {"seed": self.seed, "funnel": asdict(self.funnel), "rates": self.funnel.rates,
               "expected_escape": self.expected_escape, "ledger": ledger_report(self.outcomes).to_dict()}
        return out


def run_cohort(n: int, config: CohortConfig | Mapping, seed: int = 0, keep_logs: bool = False,
               track_lineage: bool = False) -> CohortResult:
    """Drive ``n`` full kernel sessions and fold their logs into a funnel."""
    cfg = config if isinstance(config, CohortConfig) else CohortConfig.from_dict(config)
    if not isinstance(n, int) or n < 1 or n > MAX_SESSIONS:
        raise InvalidConfig("session count must be a positive integer")
    outcomes, logs = [], []
    for i in range(n):
        sess = cohort_session(cfg, seed, i, track_lineage).run()
        outcomes.append(outcome_from_log(sess.log))
        if keep_logs:
            logs.append(sess.log)
    expected = expected_escape_rate(cfg.model) if cfg.model is not None else None
    return CohortResult(seed, outcomes, Funnel.of(outcomes), expected, logs)


def run_cohorts(n: int, config: CohortConfig | Mapping, seeds: Iterable[int]) -> dict:
    """Mean funnel rates over several seeds (ordered fold by seed)."""
    cfg = config if isinstance(config, CohortConfig) else CohortConfig.from_dict(config)
    per_seed = [run_cohort(n, cfg, s).funnel.rates for s in seeds]
    keys = per_seed[0].keys()
    return {"seeds": len(per_seed), "mean": {k: statistics.fmean(r[k] for r in per_seed) for k in keys},
            "per_seed": per_seed}


# ---------------------------------------------------------------------------
# the ledger


@dataclass(frozen=True)
class LedgerRow:
    label: str
    sessions: int
    total: float
    recovery: float

    @property
    def pct(self) -> float:
        return 100.0 * self.recovery / self.total if self.total else 0.0


@dataclass(frozen=True)
class LedgerReport:
    credits: tuple[LedgerRow, ...]  # per level, then the total row
    hours: tuple[LedgerRow, ...]

    def to_dict(self) -> dict:
        def rows(rs):
            return [{"level": r.label, "sessions": r.sessions, "total": round(r.total, 1),
                     "recovery": round(r.recovery, 1), "pct": round(r.pct, 1)} for r in rs]
        return {"credits": rows(self.credits), "hours": rows(self.hours)}

    def text(self) -> str:
        out = []
        for title, rs, unit in (("Credit cost by recovery level", self.credits, "credits"),
                                ("Time cost by recovery level", self.hours, "hours")):
            out.append(title)
            out.append(f"  {'Recovery level':<22}{'Sessions':>9}{'Total':>12}{'Recovery':>12}{'%':>7}")
            for r in rs:
                out.append(f"  {r.label:<22}{r.sessions:>9}{r.total:>12,.1f}{r.recovery:>12,.1f}{r.pct:>7.1f}")
            out.append(f"  ({unit})")
        return "\n".join(out)


def _rows(per_level: Mapping[RecoveryLevel, tuple[int, float, float]]) -> tuple[LedgerRow, ...]:
    rows = [LedgerRow(LEVEL_LABELS[lv], *per_level.get(lv, (0, 0.0, 0.0))) for lv in RecoveryLevel]
    total = LedgerRow("Total", sum(r.sessions for r in rows), sum(r.total for r in rows),
                      sum(r.recovery for r in rows))
    return tuple(rows) + (total,)


def ledger_report(source: Sequence[SessionOutcome] | Mapping) -> LedgerReport:
    """Recovery tables from classified outcomes or from a per-level fixture.

    Percentages come from raw sums; only the display rounds. Time is reported in
    hours, sources give seconds.
    """
    credits: dict[RecoveryLevel, tuple[int, float, float]] = {}
    hours: dict[RecoveryLevel, tuple[int, float, float]] = {}
    if isinstance(source, Mapping):
        for key, row in source["levels"].items():
            lv = RecoveryLevel(key)
            credits[lv] = (row["sessions"], float(row["credits_total"]), float(row["credits_recovery"]))
            hours[lv] = (row["sessions"], row["time_total_s"] / 3600.0, row["time_recovery_s"] / 3600.0)
    else:
        acc: dict[RecoveryLevel, list[float]] = {}
        for o in source:
            lv = o.level
            if lv is None:
                continue
            a = acc.setdefault(lv, [0, 0.0, 0.0, 0.0, 0.0])
            a[0] += 1
            a[1] += o.credits_total
            a[2] += o.credits_recovery
            a[3] += o.time_total
            a[4] += o.time_recovery
        for lv, a in acc.items():
            credits[lv] = (int(a[0]), a[1], a[2])
            hours[lv] = (int(a[0]), a[3] / 3600.0, a[4] / 3600.0)
    return LedgerReport(_rows(credits), _rows(hours))


def ledger_fixture() -> dict:
    return yaml.safe_load(resources.files("rivals").joinpath("data", "ledger_fixture.yaml").read_text())


# ---------------------------------------------------------------------------
# architecture comparison


def trial_seed(seed: int, trial: int) -> int:
    return seed * 1000 + trial


def session_latency(sess: Session) -> float:
    """Wall time with independent steps overlapped (ToolChain runs them serially)."""
    per_step: dict[int | None, float] = {}
    for ev in sess.log:
        if ev.kind is EventKind.CostIncurred:
            per_step[ev.payload["step"]] = per_step.get(ev.payload["step"], 0.0) + ev.wall_time
    if sess.config.mode is Mode.ToolChain or sess.plan is None:
        return sum(per_step.values())
    finish: dict[int, float] = {}
    for step in sess.plan.steps:
        start = max((finish[d] for d in step.depends_on), default=0.0)
        finish[step.id] = start + per_step.get(step.id, 0.0)
    return max(finish.values(), default=0.0) + per_step.get(None, 0.0)


def is_correct(sess: Session, truth: Mapping[str, Any]) -> bool:
    res = sess.result
    return bool(res) and all(res.get(k) == v for k, v in truth.items())


@dataclass(frozen=True)
class ComparisonRow:
    mode: str
    trials: int
    correct: int
    mean_latency: float

    @property
    def accuracy(self) -> float:
        return self.correct / self.trials if self.trials else 0.0


def compare_architectures(scenario: str = "financial-q1", modes: Sequence[str] = ("ToolChain", "SubAgent", "Council"),
                          trials: Mapping[str, int] | int | None = None, seed: int | None = None,
                          config: Mapping | None = None, self_verify: bool = True) -> list[ComparisonRow]:
    """Run the fixture under each architecture with one shared writer profile.

    Trial counts and the seed default to the config's ``comparative`` section.
    """
    from .scenario import load_config, run_scenario

    raw = dict(config if config is not None else load_config("comparative"))
    comp = raw.get("comparative") or {}
    truth = comp.get("truth", {"discrepancy_cents": 4000})
    seed = comp.get("seed", 0) if seed is None else seed
    trials = comp.get("trials", 10) if trials is None else trials
    counts = trials if isinstance(trials, Mapping) else {m: trials for m in modes}
    rows = []
    for mode in modes:
        n = counts.get(mode, 10)
        cfg = {k: v for k, v in raw.items() if k != "self_verify"}
        cfg["checkpoints"] = False
        correct, lat = 0, []
        for t in range(n):
            sess = run_scenario(scenario, trial_seed(seed, t), cfg, mode=mode)
            correct += is_correct(sess, truth)
            lat.append(session_latency(sess))
        rows.append(ComparisonRow(mode, n, correct, statistics.fmean(lat) if lat else 0.0))
    if self_verify and "ToolChain" in modes:
        rows.extend(_self_verify_rows(scenario, raw, truth, counts.get(SELF_VERIFY, counts.get("ToolChain", 10)),
                                      counts.get(VERIFY_KEPT, 5), seed))
    return rows


SELF_VERIFY = "ToolChain+self-verify"
VERIFY_KEPT = "self-verify kept"


def pre_verify_values(sess: Session) -> dict:
    """Final values as they stood before the writer re-read its own answer."""
    before = next((ev.payload["before"] for ev in sess.log
                   if ev.kind is EventKind.VerdictIssued and ev.payload.get("self_verify")), None)
    if before is None:
        return dict(sess.result)
    for ev in sess.log:
        if ev.kind is EventKind.ArtifactProduced and ev.payload["artifact"].ref == before:
            return dict(ev.payload["artifact"].values)
    return {}


def _self_verify_rows(scenario, raw, truth, n, n_kept, seed, max_scan: int = 200) -> list[ComparisonRow]:
    """Verification on the ToolChain trial seeds, plus survival of initially right answers.

    The first row is comparable with the plain ToolChain row (same seeds). The
    second scans trials until ``n_kept`` first answers were right and counts how
    many survive the re-read.
    """
    from .scenario import run_scenario

    cfg = dict(raw)
    cfg["self_verify"] = raw.get("self_verify") or {"flip_correct": 0.6, "flip_wrong": 0.0}
    cfg["checkpoints"] = False
    correct, lat = 0, []
    kept, first_right, t = 0, 0, 0
    while (t < n or first_right < n_kept) and t < max_scan:
        sess = run_scenario(scenario, trial_seed(seed, t), cfg, mode="ToolChain")
        ok = is_correct(sess, truth)
        if t < n:
            correct += ok
            lat.append(session_latency(sess))
        first = pre_verify_values(sess)
        if first_right < n_kept and first and all(first.get(k) == v for k, v in truth.items()):
            first_right += 1
            kept += ok
        t += 1
    return [ComparisonRow(SELF_VERIFY, len(lat), correct, statistics.fmean(lat) if lat else 0.0),
            ComparisonRow(VERIFY_KEPT, first_right, kept, 0.0)]


def comparison_text(rows: Sequence[ComparisonRow]) -> str:
    out = [f"  {'Architecture':<24}{'Trials':>7}{'Correct':>9}{'Accuracy':>10}{'Latency(s)':>12}"]
    for r in rows:
        if r.mode == VERIFY_KEPT:
            out.append(f"  self-verify on {r.trials} initially correct answers: {r.correct} kept, "
                       f"{r.trials - r.correct} changed to wrong")
            continue
        out.append(f"  {r.mode:<24}{r.trials:>7}{r.correct:>9}{100 * r.accuracy:>9.0f}%{r.mean_latency:>12.1f}")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# reports


def funnel_text(f: Funnel, expected: float | None = None) -> str:
    r = f.rates
    lines = [
        f"  sessions            {f.sessions:>7}",
        f"  replan requests     {f.replan:>7}   {100 * r['replan']:6.1f}%",
        f"  executed            {f.executed:>7}",
        f"  first pass          {f.first_pass:>7}   {100 * r['first_pass']:6.1f}%",
        f"  needing recovery    {f.errors:>7}",
        f"  L1 inner caught     {f.inner_caught:>7}   {100 * r['inner_catch']:6.1f}%  (code {f.inner_code}, chart {f.inner_chart})",
        f"  L2 outer caught     {f.outer_caught:>7}   {100 * r['outer_catch']:6.1f}%",
        f"  user rejected       {f.user_rejected:>7}   {100 * r['residual']:6.1f}%",
    ]
    if expected is not None:
        lines.append(f"  closed-form escape            {100 * expected:6.2f}%")
    return "\n".join(lines)


def write_report(out_dir: str | Path, name: str, text: str, data: Mapping) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tp, jp = out / f"{name}.txt", out / f"{name}.json"
    tp.write_text(text.rstrip() + "\n", encoding="utf-8")
    jp.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return tp, jp
