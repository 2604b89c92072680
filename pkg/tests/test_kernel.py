from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rivals.kernel import (
    DEFAULT_VISIBILITY,
    SESSION_SCOPE,
    EmptyVisibility,
    Kernel,
    MessageEnvelope,
    MixedScope,
    relay_summary,
    visibility,
)
from rivals.model import (
    AgentRole,
    ArtifactPayload,
    ControlPayload,
    Decision,
    Layer,
    Phase,
    Reason,
    RoleKind,
    SchemaViolation,
    StepKind,
    SummaryPayload,
    Verdict,
    VerdictPayload,
)
from rivals.session import EventKind, SessionLog

CODE_CRITIC = AgentRole(RoleKind.CodeCritic)
WRITER = AgentRole(RoleKind.Writer, "python")
SUMMARIZER = AgentRole(RoleKind.Summarizer, "team")


def _ctl(action="query"):
    return ControlPayload(action)


def _art(step=1, attempt=0, producer="writer-s1"):
    return ArtifactPayload(step, StepKind.Transform, attempt, producer, fields=("a",), row_count=3)


def _verdict(decision, critic_id="code-critic"):
    reasons = () if decision is Decision.Approve else (Reason("CODE_DEFECT", "d1"),)
    return VerdictPayload(Verdict(decision, reasons, CODE_CRITIC, Layer.L1Code, ("c1",), critic_id, 1))


# ---------------------------------------------------------------------------
# envelopes


def test_envelope_rejects_untyped_payload():
    with pytest.raises(SchemaViolation):
        MessageEnvelope(0, WRITER, DEFAULT_VISIBILITY["artifact"], Phase.Execution, {"raw": 1})


def test_envelope_rejects_non_earlier_causal_parent():
    with pytest.raises(SchemaViolation):
        MessageEnvelope(3, WRITER, DEFAULT_VISIBILITY["artifact"], Phase.Execution, _art(), (3,))


def test_envelope_rejects_malformed_visibility_pairs():
    with pytest.raises(SchemaViolation):
        MessageEnvelope(0, WRITER, frozenset({("Writer", "Execution")}), Phase.Execution, _art())
    with pytest.raises(SchemaViolation):
        MessageEnvelope(0, WRITER, [(RoleKind.Writer, Phase.Execution)], Phase.Execution, _art())


def test_envelope_round_trips_through_dict():
    env = MessageEnvelope(4, WRITER, DEFAULT_VISIBILITY["artifact"], Phase.Execution, _art(), (1, 2), "team-s1")
    assert MessageEnvelope.from_dict(env.to_dict()) == env


def test_visibility_accepts_names():
    assert visibility(("Writer", "Execution")) == frozenset({(RoleKind.Writer, Phase.Execution)})


# ---------------------------------------------------------------------------
# dispatch


def _kernel(*regs):
    k = Kernel(SessionLog(track_refs=False))
    for agent_id, role, team in regs:
        k.register(agent_id, role, team)
    return k


def _deliveries(log):
    return [(ev.payload["message"], ev.payload["agent"], ev.phase) for ev in log
            if ev.kind is EventKind.MessageDelivered]


def test_dispatch_delivers_now_and_holds_for_later_phase():
    k = _kernel(("exec", AgentRole(RoleKind.CodeExecutor), None), ("cc", CODE_CRITIC, None))
    k.advance(Phase.Execution)
    env = k.envelope(WRITER, DEFAULT_VISIBILITY["artifact"], _art())
    assert k.dispatch(env) == [AgentRole(RoleKind.CodeExecutor)]
    assert _deliveries(k.log) == [(0, "exec", Phase.Execution)]
    k.advance(Phase.InnerCritique)
    assert _deliveries(k.log)[-1] == (0, "cc", Phase.InnerCritique)
    # nothing is delivered twice
    k.advance(Phase.InnerCritique)
    assert len(_deliveries(k.log)) == 2


def test_dispatch_with_no_reachable_recipient_raises_after_logging():
    k = _kernel(("user", AgentRole(RoleKind.UserProxy), None))
    k.advance(Phase.Execution)
    env = k.envelope(WRITER, visibility((RoleKind.UserProxy, Phase.Approval)), _ctl())
    with pytest.raises(EmptyVisibility):
        k.dispatch(env)
    assert k.log[-1].kind is EventKind.MessageSent


def test_dispatch_refuses_stale_phase_stamp():
    k = _kernel(("user", AgentRole(RoleKind.UserProxy), None))
    env = k.envelope(WRITER, visibility((RoleKind.UserProxy, Phase.Planning)), _ctl())
    k.advance(Phase.Approval)
    with pytest.raises(SchemaViolation):
        k.dispatch(env)


def test_team_scope_limits_delivery():
    w1, w2 = AgentRole(RoleKind.Writer, "a"), AgentRole(RoleKind.Writer, "b")
    k = _kernel(("w1", w1, "team-s1"), ("w2", w2, "team-s2"), ("pe", AgentRole(RoleKind.PlanExecutor), None))
    k.advance(Phase.InnerCritique)
    env = k.envelope(CODE_CRITIC, DEFAULT_VISIBILITY["l1_verdict"], _verdict(Decision.Approve), scope="team-s1")
    k.dispatch(env)
    assert {a for _, a, _ in _deliveries(k.log)} == {"w1", "pe"}


def test_kernel_state_round_trip_keeps_pending():
    k = _kernel(("exec", AgentRole(RoleKind.CodeExecutor), None), ("cc", CODE_CRITIC, None))
    k.advance(Phase.Execution)
    k.dispatch(k.envelope(WRITER, DEFAULT_VISIBILITY["artifact"], _art()))
    k2 = Kernel.from_state(k.state(), k.log)
    assert k2.state() == k.state()
    k2.advance(Phase.InnerCritique)
    assert _deliveries(k2.log)[-1][1] == "cc"


# ---------------------------------------------------------------------------
# property: delivery matches a direct oracle

REGISTRY = (
    ("user", AgentRole(RoleKind.UserProxy), None),
    ("coord", AgentRole(RoleKind.Coordinator), None),
    ("pe", AgentRole(RoleKind.PlanExecutor), None),
    ("cc", CODE_CRITIC, None),
    ("oc", AgentRole(RoleKind.OutputCritic), None),
    ("sum", SUMMARIZER, None),
    ("w1", AgentRole(RoleKind.Writer, "a"), "team-1"),
    ("w2", AgentRole(RoleKind.Writer, "b"), "team-2"),
)
KINDS = sorted({r.kind for _, r, _ in REGISTRY} | {RoleKind.Guardrails}, key=lambda k: k.value)
PAIRS = [(k, p) for k in KINDS for p in Phase]


@st.composite
def _programs(draw):
    ops, phase = [], Phase.Planning
    for _ in range(draw(st.integers(1, 25))):
        if draw(st.booleans()):
            phase = Phase(draw(st.integers(phase.value, max(Phase).value)))
            ops.append(("advance", phase))
        else:
            vis = frozenset(draw(st.lists(st.sampled_from(PAIRS), min_size=1, max_size=6)))
            scope = draw(st.sampled_from([SESSION_SCOPE, "team-1", "team-2"]))
            ops.append(("send", vis, scope))
    return ops


def _accepts(team, scope):
    return team is None or scope == SESSION_SCOPE or team == scope


@settings(max_examples=300, deadline=None)
@given(_programs())
def test_delivery_matches_oracle(ops):
    k = _kernel(*REGISTRY)
    sent = []  # (envelope id, vis, scope, op index, phase at send)
    phases = [Phase.Planning]  # phase in force after each op
    expect_raise = {}
    for i, op in enumerate(ops):
        if op[0] == "advance":
            k.advance(op[1])
        else:
            env = k.envelope(WRITER, op[1], _ctl(), scope=op[2])
            reachable = any(_accepts(team, op[2]) and (role.kind, p) in op[1]
                            for _, role, team in REGISTRY for p in Phase if p >= k.phase)
            expect_raise[env.id] = not reachable
            try:
                k.dispatch(env)
                assert reachable
            except EmptyVisibility:
                assert not reachable
            sent.append((env.id, op[1], op[2], i, k.phase))
        phases.append(k.phase)

    got = _deliveries(k.log)
    # safety: a delivery names an allowed (role, phase) pair and an accepting team
    roles = {a: (r, t) for a, r, t in REGISTRY}
    by_id = {s[0]: s for s in sent}
    for mid, agent, phase in got:
        role, team = roles[agent]
        assert (role.kind, phase) in by_id[mid][1]
        assert _accepts(team, by_id[mid][2])
        assert not expect_raise[mid]
    # no duplicates
    assert len(got) == len(set((m, a) for m, a, _ in got))
    # liveness: every satisfiable pair reached during the run was delivered
    want = set()
    for mid, vis, scope, i, _ in sent:
        if expect_raise[mid]:
            continue
        later = set(phases[i + 1:])
        for agent, role, team in REGISTRY:
            if _accepts(team, scope) and any((role.kind, p) in vis for p in later):
                want.add((mid, agent))
    assert {(m, a) for m, a, _ in got} == want


# ---------------------------------------------------------------------------
# upward relay


def _team_transcript():
    vis_a, vis_v = DEFAULT_VISIBILITY["artifact"], DEFAULT_VISIBILITY["l1_verdict"]
    rejected = _art(attempt=0)
    approved = _art(attempt=1)
    msgs = [
        MessageEnvelope(0, WRITER, vis_a, Phase.Execution, rejected, (), "team-s1"),
        MessageEnvelope(1, CODE_CRITIC, vis_v, Phase.InnerCritique, _verdict(Decision.Reject), (0,), "team-s1"),
        MessageEnvelope(2, WRITER, vis_a, Phase.Execution, approved, (1,), "team-s1"),
        MessageEnvelope(3, CODE_CRITIC, vis_v, Phase.InnerCritique, _verdict(Decision.Approve), (2,), "team-s1"),
    ]
    return msgs, approved


def test_relay_summary_describes_only_the_approved_artifact():
    msgs, approved = _team_transcript()
    env = relay_summary(msgs, SUMMARIZER, 10)
    p = env.payload
    assert isinstance(p, SummaryPayload)
    assert p.provenance == (2, 3)
    assert p.content["artifact_ref"] == approved.ref
    assert env.causal_parents == (0, 1, 2, 3)
    assert env.scope == SESSION_SCOPE
    # rejected attempts and verdict reasons never appear in the upward content
    text = repr(p.content)
    assert "CODE_DEFECT" not in text and "artifact:s1/0" not in text
    assert env.visibility == DEFAULT_VISIBILITY["team_summary"]


def test_relay_summary_rejects_mixed_scopes_and_wrong_sender():
    msgs, _ = _team_transcript()
    other = MessageEnvelope(4, WRITER, DEFAULT_VISIBILITY["artifact"], Phase.Execution, _art(2), (), "team-s2")
    with pytest.raises(MixedScope):
        relay_summary(msgs + [other], SUMMARIZER, 10)
    with pytest.raises(SchemaViolation):
        relay_summary(msgs, WRITER, 10)


def test_relay_summary_without_approval_is_empty():
    msgs, _ = _team_transcript()
    env = relay_summary(msgs[:2], SUMMARIZER, 10)
    assert env.payload.content == {} and env.payload.provenance == ()
