from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rivals.model import ArtifactPayload, RoleKind, StepKind
from rivals.plan import (
    AcceptanceCriterion,
    ApprovalOutcome,
    AutoAccept,
    CyclicPlan,
    DenyAll,
    ExecutionPlan,
    InteractivePolicy,
    NotApproved,
    PlanError,
    PlanStep,
    Query,
    ScriptedPolicy,
    UnplannableQuery,
    approve_plan,
    build_plan,
    field_present,
    guardrail_check,
    numeric_tolerance,
    policy,
    policy_from_state,
    refine_plan,
    row_count_bound,
    schedule,
    schema_match,
    topological_order,
)
from rivals.scenario import query

CRIT = AcceptanceCriterion("ok", "ran", policy("executed"))


def _plan(deps: dict[int, tuple[int, ...]], approved=True) -> ExecutionPlan:
    steps = tuple(PlanStep(i, StepKind.Transform, tuple(d), criteria=("ok",)) for i, d in deps.items())
    return ExecutionPlan(steps, ("ok",), {"ok": CRIT}, approved=approved, approval_event=0 if approved else None)


# ---------------------------------------------------------------------------
# criteria


def _artifact(**kw):
    base = dict(step_id=1, kind=StepKind.Transform, attempt=0, producer="w", fields=("a", "b"), row_count=2,
                non_null={"a": 2, "b": 1}, values={"x": 10.0}, executed=True)
    base.update(kw)
    return ArtifactPayload(**base)


def test_predicates():
    art = _artifact()
    assert field_present("a").check(art)
    assert not field_present("b").check(art)  # present but partly null
    assert row_count_bound(1, 2).check(art) and not row_count_bound(3).check(art)
    assert schema_match("a", "b").check(art) and schema_match("a", prefix=True).check(art)
    assert not schema_match("a").check(art)
    assert numeric_tolerance("x", 10.4, 0.5).check(art) and not numeric_tolerance("x", 11, 0.5).check(art)
    assert policy("executed").check(art)
    assert not policy("executed").check(_artifact(failure="boom"))
    with pytest.raises(PlanError):
        policy("nope")


def test_criterion_round_trip():
    c = AcceptanceCriterion("c", "desc", row_count_bound(1, None), declared_at=7)
    assert AcceptanceCriterion.from_dict(c.to_dict()) == c


# ---------------------------------------------------------------------------
# planning


def test_build_plan_for_fixture_query():
    plan = build_plan(query())
    assert [s.id for s in plan.steps] == list(range(1, 9))
    assert not plan.approved
    assert topological_order(plan) == list(range(1, 9))
    for s in plan.steps:
        assert s.criteria and all(c in plan.criteria for c in s.criteria)
    assert ExecutionPlan.from_dict(plan.to_dict()) == plan


def test_build_plan_refuses_unplannable_queries():
    with pytest.raises(UnplannableQuery):
        build_plan(Query(""))
    with pytest.raises(UnplannableQuery):
        build_plan(Query("no-such-task"))
    with pytest.raises(UnplannableQuery):
        build_plan(Query("financial-reconciliation", flags=frozenset({"missing_inputs"})))


def test_declare_stamps_every_criterion():
    plan = build_plan(query()).declare(5)
    assert {c.declared_at for c in plan.criteria.values()} == {5}


def test_plan_validation():
    with pytest.raises(CyclicPlan):
        PlanStep(1, StepKind.Extract, (1,))
    with pytest.raises(CyclicPlan):
        _plan({1: (2,), 2: (1,)})
    with pytest.raises(PlanError):
        _plan({1: (9,)})
    with pytest.raises(PlanError):
        ExecutionPlan((PlanStep(1, StepKind.Extract, criteria=("missing",)),), ("ok",), {"ok": CRIT})
    with pytest.raises(PlanError):
        ExecutionPlan((PlanStep(1, StepKind.Extract, criteria=("ok",)),), ("ok",), {"ok": CRIT}, approved=True)
    with pytest.raises(PlanError):
        PlanStep(1, StepKind.Extract, max_retries=0)


# ---------------------------------------------------------------------------
# approval gate


def test_schedule_requires_approval():
    with pytest.raises(NotApproved):
        schedule(_plan({1: ()}, approved=False), [])


def test_auto_accept_and_deny():
    plan = build_plan(query())
    ok, d = approve_plan(plan, AutoAccept(), 12)
    assert ok.approved and ok.approval_event == 12 and d.outcome is ApprovalOutcome.Accept
    with pytest.raises(PlanError):
        approve_plan(ok, AutoAccept(), 13)
    no, d = approve_plan(plan, DenyAll(), 12)
    assert not no.approved and d.outcome is ApprovalOutcome.Decline and no.feedback == (d.reason,)


def test_guardrail_precedes_policy():
    plan = build_plan(query())
    assert guardrail_check(plan) is None
    out, d = approve_plan(plan, AutoAccept(), 3, deny_kinds=["Reconcile"])
    assert d.outcome is ApprovalOutcome.Guardrail and d.by is RoleKind.Guardrails and not out.approved


def test_scripted_and_interactive_policies():
    plan = build_plan(query())
    sp = ScriptedPolicy([{"outcome": "edit", "edits": {"max_retries": 3}}])
    assert sp.decide(plan).outcome is ApprovalOutcome.Edit
    assert sp.decide(plan).outcome is ApprovalOutcome.Accept
    restored = policy_from_state(sp.state())
    assert restored.position == 1
    answers = iter(["y", "e", "n"])
    ip = InteractivePolicy(lambda prompt: next(answers))
    assert [ip.decide(plan).outcome for _ in range(3)] == [
        ApprovalOutcome.Accept, ApprovalOutcome.Edit, ApprovalOutcome.Decline]
    assert InteractivePolicy(lambda p: "  look at step 7 ").escalated({"reason": "X", "step": 7}) == "look at step 7"


def test_refine_plan_edits():
    plan = build_plan(query())
    d = ScriptedPolicy([{"outcome": "edit", "edits": {"max_retries": 3}}]).decide(plan)
    out = refine_plan(plan, d)
    assert {s.max_retries for s in out.steps} == {3} and out.revision == 1
    drop = ScriptedPolicy([{"outcome": "edit", "edits": {"drop_steps": [8]}}]).decide(plan)
    assert [s.id for s in refine_plan(plan, drop).steps] == list(range(1, 8))
    bad = ScriptedPolicy([{"outcome": "edit", "edits": {"drop_steps": [1]}}]).decide(plan)
    with pytest.raises(PlanError):
        refine_plan(plan, bad)


# ---------------------------------------------------------------------------
# property: scheduling against brute force


@st.composite
def _dags(draw, max_nodes=12):
    n = draw(st.integers(1, max_nodes))
    ids = draw(st.lists(st.integers(-50, 500), min_size=n, max_size=n, unique=True))
    # edges only go from earlier to later in a hidden permutation, so the graph is acyclic
    hidden = draw(st.permutations(ids))
    deps = {}
    for pos, i in enumerate(hidden):
        earlier = hidden[:pos]
        deps[i] = tuple(sorted(draw(st.sets(st.sampled_from(earlier), max_size=len(earlier))) if earlier else ()))
    return deps


def _is_topological(order, deps):
    seen = set()
    for i in order:
        if not set(deps[i]) <= seen:
            return False
        seen.add(i)
    return len(order) == len(deps) and seen == set(deps)


def _drain(plan):
    """Run the plan by always taking the first ready step."""
    done, order = [], []
    while True:
        ready = schedule(plan, done)
        if not ready:
            return order
        done.append(ready[0])
        order.append(ready[0])


@settings(max_examples=300, deadline=None)
@given(_dags())
def test_schedule_is_a_topological_order(deps):
    plan = _plan(deps)
    order = _drain(plan)
    assert _is_topological(order, deps)
    assert order == topological_order(plan)
    # every intermediate ready set is exactly the steps whose parents are all done
    done: set = set()
    for i in order:
        ready = schedule(plan, done)
        assert set(ready) == {s for s in deps if s not in done and set(deps[s]) <= done}
        done.add(i)


@settings(max_examples=150, deadline=None)
@given(_dags(max_nodes=7))
def test_schedule_matches_exhaustive_enumeration(deps):
    plan = _plan(deps)
    valid = [list(p) for p in itertools.permutations(deps) if _is_topological(p, deps)]
    assert valid
    assert _drain(plan) == min(valid)


@settings(max_examples=100, deadline=None)
@given(_dags(), st.data())
def test_descendants_closed_under_dependents(deps, data):
    plan = _plan(deps)
    roots = data.draw(st.sets(st.sampled_from(sorted(deps))))
    out = plan.descendants(roots)
    assert roots <= out
    for s, ds in deps.items():
        if set(ds) & out:
            assert s in out
