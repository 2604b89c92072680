from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rivals.agents import StochasticProfile, Tier, spawn
from rivals.cascade import (
    CascadeError,
    CascadeModel,
    LayerMismatch,
    RetriesExhausted,
    aggregate,
    evaluate,
    expected_escape_rate,
    inner_loop,
    outer_gate,
    steps_to_rerun,
)
from rivals.model import (
    AgentRole,
    ArtifactPayload,
    Decision,
    Defect,
    DefectKind,
    Layer,
    Phase,
    Reason,
    RoleKind,
    SchemaViolation,
    StepKind,
    Verdict,
)
from rivals.plan import AcceptanceCriterion, ExecutionPlan, PlanStep, field_present, policy

CODE = AgentRole(RoleKind.CodeCritic)
CHART = AgentRole(RoleKind.ChartCritic)
OUTPUT = AgentRole(RoleKind.OutputCritic)
WRITER = AgentRole(RoleKind.Writer, "python")
CRIT = AcceptanceCriterion("ok", "ran", policy("executed"))


def _critic(role, cid, p=1.0, phase=Phase.InnerCritique, **kw):
    return spawn(cid, role, StochasticProfile(detectable_given_layer={phase: p}, **kw), 0, "vendor-b")


def _art(step=1, kind=StepKind.Transform, defects=(), producer="writer-s1", attempt=0, **kw):
    return ArtifactPayload(step, kind, attempt, producer, fields=("a",), row_count=1, non_null={"a": 1},
                           executed=True, defects=tuple(defects), **kw)


# ---------------------------------------------------------------------------
# closed form


def test_escape_rate_reference_values():
    m = CascadeModel(0.75, 0.878, 0.146)
    assert expected_escape_rate(m) == pytest.approx(0.078141, abs=1e-12)
    assert 0.0775 <= expected_escape_rate(m) <= 0.0790
    assert expected_escape_rate(m, [0.146]) == pytest.approx(0.066732414, abs=1e-12)


def test_model_rejects_non_probabilities():
    with pytest.raises(CascadeError):
        CascadeModel(1.2, 0.5, 0.5)
    with pytest.raises(CascadeError):
        CascadeModel(float("nan"), 0.5, 0.5)


_p = st.floats(0, 1, allow_nan=False)


@given(_p, _p, _p, _p, st.lists(_p, max_size=4))
def test_escape_rate_is_monotone(e, a, b, c, extra):
    lo, hi = sorted((a, c))
    base = expected_escape_rate(CascadeModel(e, lo, b), extra)
    assert expected_escape_rate(CascadeModel(e, hi, b), extra) <= base + 1e-15
    assert expected_escape_rate(CascadeModel(e, a, b), extra + [c]) <= expected_escape_rate(
        CascadeModel(e, a, b), extra) + 1e-15
    assert 0.0 <= base <= e


# ---------------------------------------------------------------------------
# verdicts


def test_verdict_schema():
    with pytest.raises(SchemaViolation):
        Verdict(Decision.Reject, (), CODE, Layer.L1Code, ())
    with pytest.raises(SchemaViolation):
        Verdict(Decision.Approve, (), CODE, Layer.L2Output, ())


def test_no_self_certification():
    w = spawn("writer-s1", AgentRole(RoleKind.CodeCritic), StochasticProfile(), 0, "v")
    with pytest.raises(CascadeError):
        evaluate(w, _art(producer="writer-s1"), [CRIT])


def test_layer_mismatch():
    writer = spawn("w", WRITER, StochasticProfile(), 0, "v")
    with pytest.raises(LayerMismatch):
        evaluate(writer, _art(), [CRIT])
    with pytest.raises(LayerMismatch):
        evaluate(_critic(CHART, "chart-critic"), _art(kind=StepKind.Transform), [CRIT])


def test_critic_sees_only_its_defect_kind():
    code = _critic(CODE, "code-critic")
    intent = _art(defects=[Defect("d1", DefectKind.IntentDefect, 0.5)])
    assert evaluate(code, intent, [CRIT]).decision is Decision.Approve
    bug = _art(defects=[Defect("d2", DefectKind.CodeDefect, 0.5)])
    v = evaluate(code, bug, [CRIT])
    assert v.decision is Decision.Reject and v.reasons == (Reason("CODE_DEFECT", "d2"),)


def test_criteria_failures_reject_deterministically():
    code = _critic(CODE, "code-critic", p=0.0)
    v = evaluate(code, _art(), [AcceptanceCriterion("f", "needs b", field_present("b"))])
    assert v.decision is Decision.Reject and v.reasons[0].code == "CRITERION_FAILED"
    assert v.evaluated_criteria == ("f",)


def test_catch_is_sticky_per_defect():
    critic = _critic(CODE, "code-critic", p=0.5)
    d = Defect("d", DefectKind.CodeDefect, 0.1)
    first = evaluate(critic, _art(defects=[d]), [CRIT]).decision
    assert all(evaluate(critic, _art(defects=[d]), [CRIT]).decision is first for _ in range(20))


def test_aggregate_is_unanimous_and():
    ok = Verdict(Decision.Approve, (), CODE, Layer.L1Code, ())
    bad = Verdict(Decision.Reject, (Reason("CODE_DEFECT", "x"),), CHART, Layer.L1Chart, ())
    esc = Verdict(Decision.Escalate, (Reason("CRITERION_FAILED", "g"),), CODE, Layer.L1Code, ())
    assert aggregate([ok, ok]) == (Decision.Approve, ())
    assert aggregate([ok, bad]) == (Decision.Reject, (Reason("CODE_DEFECT", "x"),))
    assert aggregate([bad, esc])[0] is Decision.Escalate


# ---------------------------------------------------------------------------
# inner loop


def test_inner_loop_counts_rounds_until_repair():
    step = PlanStep(1, StepKind.Transform, criteria=("ok",), params={"fields": ["a"]})
    writer = spawn("writer-s1", WRITER, StochasticProfile(error_rate=1.0, repair_schedule=(1.0, 1.0, 0.0)), 0,
                   "vendor-a", "vendor-c")
    art, rounds = inner_loop(step, writer, [_critic(CODE, "code-critic")], [CRIT])
    assert rounds == 4 and not art.defects and art.attempt == 3


def test_inner_loop_escalates_tier_after_two_rejections():
    from rivals.cascade import LocalTeam

    step = PlanStep(1, StepKind.Transform, criteria=("ok",), params={"fields": ["a"]})
    writer = spawn("writer-s1", WRITER, StochasticProfile(error_rate=1.0, repair_schedule=(1.0, 1.0, 0.0)), 0,
                   "vendor-a", "vendor-c")
    team = LocalTeam(writer, [_critic(CODE, "code-critic")], [CRIT])
    inner_loop(step, writer, team.critics, [CRIT], team=team)
    tiers = [w.tier for w in team.writers_seen]
    assert tiers[0] is Tier.Junior and tiers[1] is Tier.Senior


def test_inner_loop_exhausts_retries():
    step = PlanStep(1, StepKind.Transform, criteria=("ok",), max_retries=2, params={"fields": ["a"]})
    writer = spawn("writer-s1", WRITER, StochasticProfile(error_rate=1.0, repair_factor=1.0), 0, "v")
    with pytest.raises(RetriesExhausted):
        inner_loop(step, writer, [_critic(CODE, "code-critic")], [CRIT])


# ---------------------------------------------------------------------------
# outer gate


def _two_step_plan():
    steps = (PlanStep(1, StepKind.Transform, (), criteria=("ok",)),
             PlanStep(2, StepKind.Synthesize, (1,), criteria=("ok",)))
    return ExecutionPlan(steps, ("ok",), {"ok": CRIT}, approved=True, approval_event=0)


def test_outer_gate_cites_the_defective_step():
    plan = _two_step_plan()
    critic = _critic(OUTPUT, "output-critic", phase=Phase.OuterCritique)
    outputs = {1: _art(1, defects=[Defect("i", DefectKind.IntentDefect, 0.2)]),
               2: _art(2, StepKind.Synthesize, producer="writer-s2")}
    v = outer_gate(outputs, critic, plan)
    assert v.decision is Decision.Reject and v.layer is Layer.L2Output
    assert v.reasons == (Reason("INTENT_DEFECT", "artifact:s1/0#i"),)
    assert steps_to_rerun(v, plan) == [1, 2]


def test_outer_gate_guards():
    plan = _two_step_plan()
    critic = _critic(OUTPUT, "output-critic", phase=Phase.OuterCritique)
    with pytest.raises(CascadeError):
        outer_gate({1: _art(1)}, critic, plan)
    with pytest.raises(CascadeError):
        outer_gate({1: _art(1, producer="output-critic"), 2: _art(2, StepKind.Synthesize)}, critic, plan)
    with pytest.raises(LayerMismatch):
        outer_gate({1: _art(1), 2: _art(2)}, _critic(CODE, "code-critic"), plan)
