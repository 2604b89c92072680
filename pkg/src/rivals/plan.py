"""Execution plans, pre-declared acceptance criteria and the approval gate."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Sequence

from .model import ArtifactPayload, RoleKind, StepKind

DEFAULT_MAX_RETRIES = 8


class PlanError(Exception):
    pass


class UnplannableQuery(PlanError):
    pass


class NotApproved(PlanError):
    pass


class CyclicPlan(PlanError):
    pass


# ---------------------------------------------------------------------------
# criteria


class PredicateKind(str, enum.Enum):
    FieldPresent = "field_present"
    NumericTolerance = "numeric_tolerance"
    RowCountBound = "row_count_bound"
    SchemaMatch = "schema_match"
    Policy = "policy"


def _policy_nonempty(a: ArtifactPayload) -> bool:
    return a.row_count > 0


def _policy_executed(a: ArtifactPayload) -> bool:
    return a.executed and a.failure is None


def _policy_no_nulls(a: ArtifactPayload) -> bool:
    return all(a.non_null.get(f, 0) == a.row_count for f in a.fields)


NAMED_POLICIES: dict[str, Callable[[ArtifactPayload], bool]] = {
    "nonempty": _policy_nonempty,
    "executed": _policy_executed,
    "no_nulls": _policy_no_nulls,
}


@dataclass(frozen=True, slots=True)
class Predicate:
    kind: PredicateKind
    args: Mapping[str, Any] = field(default_factory=dict)

    def check(self, art: ArtifactPayload) -> bool:
        a = self.args
        if self.kind is PredicateKind.FieldPresent:
            # present and fully populated
            return all(f in art.fields and art.non_null.get(f, 0) == art.row_count for f in a["fields"])
        if self.kind is PredicateKind.NumericTolerance:
            v = art.values.get(a["field"])
            return v is not None and abs(v - a["target"]) <= a.get("tol", 0)
        if self.kind is PredicateKind.RowCountBound:
            lo, hi = a.get("min", 0), a.get("max")
            return art.row_count >= lo and (hi is None or art.row_count <= hi)
        if self.kind is PredicateKind.SchemaMatch:
            want = list(a["fields"])
            return list(art.fields[: len(want)]) == want if a.get("prefix") else list(art.fields) == want
        if self.kind is PredicateKind.Policy:
            return NAMED_POLICIES[a["name"]](art)
        raise AssertionError(self.kind)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "args": dict(self.args)}

    @classmethod
    def from_dict(cls, d) -> "Predicate":
        return cls(PredicateKind(d["kind"]), d.get("args", {}))


def field_present(*fields: str) -> Predicate:
    return Predicate(PredicateKind.FieldPresent, {"fields": list(fields)})


def row_count_bound(lo: int = 0, hi: int | None = None) -> Predicate:
    return Predicate(PredicateKind.RowCountBound, {"min": lo, "max": hi})


def schema_match(*fields: str, prefix: bool = False) -> Predicate:
    return Predicate(PredicateKind.SchemaMatch, {"fields": list(fields), "prefix": prefix})


def numeric_tolerance(name: str, target: float, tol: float) -> Predicate:
    return Predicate(PredicateKind.NumericTolerance, {"field": name, "target": target, "tol": tol})


def policy(name: str) -> Predicate:
    if name not in NAMED_POLICIES:
        raise PlanError(f"unknown policy {name!r}")
    return Predicate(PredicateKind.Policy, {"name": name})


@dataclass(frozen=True, slots=True)
class AcceptanceCriterion:
    id: str
    description: str
    predicate: Predicate
    declared_at: int | None = None

    @property
    def ref(self) -> str:
        return f"criterion:{self.id}"

    def check(self, art: ArtifactPayload) -> bool:
        return self.predicate.check(art)

    def to_dict(self) -> dict:
        return {"id": self.id, "description": self.description,
                "predicate": self.predicate.to_dict(), "declared_at": self.declared_at}

    @classmethod
    def from_dict(cls, d) -> "AcceptanceCriterion":
        return cls(d["id"], d["description"], Predicate.from_dict(d["predicate"]), d.get("declared_at"))


# ---------------------------------------------------------------------------
# plans


@dataclass(frozen=True, slots=True)
class PlanStep:
    id: int
    kind: StepKind
    depends_on: tuple[int, ...] = ()
    writer_spec: str = "python"
    criteria: tuple[str, ...] = ()
    max_retries: int = DEFAULT_MAX_RETRIES
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.max_retries < 1:
            raise PlanError("max_retries must be positive")
        if self.id in self.depends_on:
            raise CyclicPlan(f"step {self.id} depends on itself")

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind.value, "depends_on": list(self.depends_on),
                "writer_spec": self.writer_spec, "criteria": list(self.criteria),
                "max_retries": self.max_retries, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d) -> "PlanStep":
        return cls(d["id"], StepKind(d["kind"]), tuple(d["depends_on"]), d["writer_spec"],
                   tuple(d["criteria"]), d["max_retries"], d.get("params", {}))


@dataclass(frozen=True, slots=True)
class ExecutionPlan:
    steps: tuple[PlanStep, ...]
    plan_criteria: tuple[str, ...]
    criteria: Mapping[str, AcceptanceCriterion]
    approved: bool = False
    approval_event: int | None = None
    task: str = ""
    feedback: tuple[str, ...] = ()
    revision: int = 0

    def __post_init__(self):
        ids = [s.id for s in self.steps]
        if len(set(ids)) != len(ids):
            raise PlanError("duplicate step ids")
        known = set(ids)
        for s in self.steps:
            if not set(s.depends_on) <= known:
                raise PlanError(f"step {s.id} depends on unknown steps")
            for c in s.criteria:
                if c not in self.criteria:
                    raise PlanError(f"step {s.id} names undeclared criterion {c}")
        for c in self.plan_criteria:
            if c not in self.criteria:
                raise PlanError(f"undeclared plan criterion {c}")
        if self.approved and self.approval_event is None:
            raise PlanError("an approved plan must record its approval event")
        topological_order(self)

    def step(self, step_id: int) -> PlanStep:
        for s in self.steps:
            if s.id == step_id:
                return s
        raise KeyError(step_id)

    def criteria_for(self, ids: Iterable[str]) -> list[AcceptanceCriterion]:
        return [self.criteria[c] for c in ids]

    def descendants(self, roots: Iterable[int]) -> set[int]:
        out = set(roots)
        for sid in topological_order(self):
            if out & set(self.step(sid).depends_on):
                out.add(sid)
        return out

    def declare(self, event_index: int) -> "ExecutionPlan":
        """Stamp every criterion with the log index of the plan announcement."""
        crit = {k: replace(v, declared_at=event_index) for k, v in self.criteria.items()}
        return replace(self, criteria=crit)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "steps": [s.to_dict() for s in self.steps],
            "plan_criteria": list(self.plan_criteria),
            "criteria": {k: v.to_dict() for k, v in sorted(self.criteria.items())},
            "approved": self.approved,
            "approval_event": self.approval_event,
            "feedback": list(self.feedback),
            "revision": self.revision,
        }

    @classmethod
    def from_dict(cls, d) -> "ExecutionPlan":
        return cls(
            steps=tuple(PlanStep.from_dict(s) for s in d["steps"]),
            plan_criteria=tuple(d["plan_criteria"]),
            criteria={k: AcceptanceCriterion.from_dict(v) for k, v in d["criteria"].items()},
            approved=d["approved"],
            approval_event=d["approval_event"],
            task=d.get("task", ""),
            feedback=tuple(d.get("feedback", ())),
            revision=d.get("revision", 0),
        )


# ---------------------------------------------------------------------------
# planning


@dataclass(frozen=True)
class Query:
    task: str
    params: Mapping[str, Any] = field(default_factory=dict)
    flags: frozenset = frozenset()

    def to_dict(self) -> dict:
        return {"task": self.task, "params": dict(self.params), "flags": sorted(self.flags)}

    @classmethod
    def from_dict(cls, d) -> "Query":
        return cls(d["task"], d.get("params", {}), frozenset(d.get("flags", ())))


# a template turns a query into (steps, criteria, plan_criteria)
PlanTemplate = Callable[[Query], tuple[Sequence[PlanStep], Sequence[AcceptanceCriterion], Sequence[str]]]

_TEMPLATES: dict[str, PlanTemplate] = {}


def register_template(task: str):
    def deco(fn: PlanTemplate) -> PlanTemplate:
        _TEMPLATES[task] = fn
        return fn
    return deco


@dataclass(frozen=True)
class PlannerProfile:
    """What the (deterministic) planner can plan for."""

    tasks: frozenset | None = None  # None: every registered template
    max_retries: int | None = None
    templates: Mapping[str, PlanTemplate] = field(default_factory=dict)

    def template(self, task: str) -> PlanTemplate | None:
        if self.tasks is not None and task not in self.tasks:
            return None
        return self.templates.get(task) or _TEMPLATES.get(task)


def build_plan(query: Query, profile: PlannerProfile | None = None) -> ExecutionPlan:
    if not query.task:
        raise UnplannableQuery("empty query")
    profile = profile or PlannerProfile()
    if "missing_inputs" in query.flags:
        raise UnplannableQuery("query lacks inputs the plan would need")
    tmpl = profile.template(query.task)
    if tmpl is None:
        raise UnplannableQuery(f"no plan template for task {query.task!r}")
    steps, criteria, plan_criteria = tmpl(query)
    if not steps:
        raise UnplannableQuery("degenerate plan with no steps")
    if profile.max_retries is not None:
        steps = [replace(s, max_retries=profile.max_retries) for s in steps]
    for s in steps:
        if not s.criteria:
            raise PlanError(f"step {s.id} declares no acceptance criteria")
    if not plan_criteria:
        raise PlanError("plan declares no plan-level criteria")
    return ExecutionPlan(tuple(sorted(steps, key=lambda s: s.id)), tuple(plan_criteria),
                         {c.id: c for c in criteria}, task=query.task)


def topological_order(plan: ExecutionPlan) -> list[int]:
    """Kahn's algorithm, smallest ready id first."""
    indeg = {s.id: len(s.depends_on) for s in plan.steps}
    children: dict[int, list[int]] = {s.id: [] for s in plan.steps}
    for s in plan.steps:
        for d in s.depends_on:
            children[d].append(s.id)
    ready = sorted(i for i, n in indeg.items() if n == 0)
    order = []
    while ready:
        i = ready.pop(0)
        order.append(i)
        for c in children[i]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
        ready.sort()
    if len(order) != len(plan.steps):
        raise CyclicPlan("plan graph has a cycle")
    return order


def schedule(plan: ExecutionPlan, completed: Iterable[int]) -> list[int]:
    if not plan.approved:
        raise NotApproved("plan has not passed the approval gate")
    done = set(completed)
    ids = {s.id for s in plan.steps}
    if not done <= ids:
        raise PlanError(f"completed names unknown steps {sorted(done - ids)}")
    return sorted(s.id for s in plan.steps if s.id not in done and set(s.depends_on) <= done)


# ---------------------------------------------------------------------------
# approval


class ApprovalOutcome(str, enum.Enum):
    Accept = "accept"
    Edit = "edit"        # refuse with requested changes; plan goes back to the refiner
    Decline = "decline"  # refuse outright; session ends in Planning
    Guardrail = "guardrail"


@dataclass(frozen=True)
class ApprovalDecision:
    outcome: ApprovalOutcome
    by: RoleKind = RoleKind.UserProxy
    reason: str = ""
    edits: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"outcome": self.outcome.value, "by": self.by.value, "reason": self.reason, "edits": dict(self.edits)}


class ApprovalPolicy:
    """Decides whether a plan may execute. Subclasses must be serializable."""

    name = "base"

    def decide(self, plan: ExecutionPlan) -> ApprovalDecision:
        raise NotImplementedError

    def escalated(self, payload: Mapping[str, Any]) -> str | None:
        """Called when the session escalates to the user; returns an optional note."""
        return None

    def state(self) -> dict:
        return {"name": self.name}


class AutoAccept(ApprovalPolicy):
    name = "auto"

    def decide(self, plan):
        return ApprovalDecision(ApprovalOutcome.Accept, reason="auto-accept")


class ScriptedPolicy(ApprovalPolicy):
    """Replays a fixed list of decisions, then accepts."""

    name = "scripted"

    def __init__(self, decisions: Sequence[Mapping | ApprovalDecision] = (), position: int = 0):
        self.decisions = [d if isinstance(d, ApprovalDecision) else
                          ApprovalDecision(ApprovalOutcome(d["outcome"]), reason=d.get("reason", ""),
                                           edits=d.get("edits", {})) for d in decisions]
        self.position = position

    def decide(self, plan):
        if self.position < len(self.decisions):
            d = self.decisions[self.position]
            self.position += 1
            return d
        return ApprovalDecision(ApprovalOutcome.Accept, reason="script exhausted")

    def state(self):
        return {"name": self.name, "decisions": [d.to_dict() for d in self.decisions], "position": self.position}


class DenyAll(ApprovalPolicy):
    name = "deny"

    def decide(self, plan):
        return ApprovalDecision(ApprovalOutcome.Decline, reason="user declined the plan")


class InteractivePolicy(ApprovalPolicy):
    """Reads one-line decisions: y(es) / e(dit) / anything else declines."""

    name = "interactive"

    def __init__(self, ask: Callable[[str], str] = input):
        self.ask = ask

    def decide(self, plan):
        lines = [f"  step {s.id}: {s.kind.value} {s.params.get('label', '')}".rstrip() for s in plan.steps]
        prompt = "Proposed plan:\n" + "\n".join(lines) + "\nApprove? [y/e/N] "
        answer = self.ask(prompt).strip().lower()
        if answer in ("y", "yes"):
            return ApprovalDecision(ApprovalOutcome.Accept, reason="user approved")
        if answer in ("e", "edit"):
            return ApprovalDecision(ApprovalOutcome.Edit, reason="user requested edits")
        return ApprovalDecision(ApprovalOutcome.Decline, reason="user declined the plan")

    def escalated(self, payload):
        detail = ", ".join(f"{k}={v}" for k, v in sorted(payload.items()) if k != "reason")
        note = self.ask(f"Escalation {payload['reason']} ({detail}). Note for the planner (enter to skip): ")
        return note.strip() or None


def policy_from_state(state: Mapping | None) -> ApprovalPolicy:
    if not state or state["name"] == "auto":
        return AutoAccept()
    if state["name"] == "scripted":
        return ScriptedPolicy(state.get("decisions", ()), state.get("position", 0))
    if state["name"] == "deny":
        return DenyAll()
    if state["name"] == "interactive":
        return InteractivePolicy()
    raise PlanError(f"unknown approval policy {state['name']!r}")


def guardrail_check(plan: ExecutionPlan, deny_kinds: Iterable[str] = ()) -> ApprovalDecision | None:
    denied = {k if isinstance(k, str) else k.value for k in deny_kinds}
    bad = [s.id for s in plan.steps if s.kind.value in denied]
    if bad:
        return ApprovalDecision(ApprovalOutcome.Guardrail, by=RoleKind.Guardrails,
                                reason=f"steps {bad} use denied step kinds")
    return None


def approve_plan(plan: ExecutionPlan, policy: ApprovalPolicy, event_index: int,
                 deny_kinds: Iterable[str] = ()) -> tuple[ExecutionPlan, ApprovalDecision]:
    """Run the guardrail check, then the approval policy.

    Returns the (possibly) approved plan and the decision taken. ``event_index``
    is the log position the approval will be recorded at.
    """
    if plan.approved:
        raise PlanError("plan is already approved")
    decision = guardrail_check(plan, deny_kinds) or policy.decide(plan)
    if decision.outcome is ApprovalOutcome.Accept:
        return replace(plan, approved=True, approval_event=event_index), decision
    return replace(plan, feedback=plan.feedback + (decision.reason,)), decision


def refine_plan(plan: ExecutionPlan, decision: ApprovalDecision) -> ExecutionPlan:
    """Apply the "fast edits" a reviewer asked for; criteria are kept."""
    steps = plan.steps
    edits = decision.edits
    if "max_retries" in edits:
        steps = tuple(replace(s, max_retries=int(edits["max_retries"])) for s in steps)
    if "drop_steps" in edits:
        drop = set(edits["drop_steps"])
        steps = tuple(s for s in steps if s.id not in drop)
        if not steps:
            raise UnplannableQuery("edits removed every step")
        for s in steps:
            if set(s.depends_on) & drop:
                raise PlanError(f"cannot drop a dependency of step {s.id}")
    return replace(plan, steps=steps, revision=plan.revision + 1)
