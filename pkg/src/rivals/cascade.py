"""Critic verdicts, veto semantics, the inner retry loop and the cascade model."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Mapping, Protocol, Sequence

from .agents import AgentInstance, AlreadySenior, escalate_tier, produce, switch_vendor
from .model import (
    LAYER_DEFECT,
    LAYER_PHASE,
    ArtifactPayload,
    Decision,
    DefectKind,
    Layer,
    Reason,
    RoleKind,
    StepKind,
    Verdict,
)
from .plan import AcceptanceCriterion, ExecutionPlan, PlanStep, PredicateKind, topological_order


def _load_reason_codes() -> tuple[int, frozenset]:
    raw = json.loads(resources.files("rivals").joinpath("data/reason_codes.json").read_text())
    return raw["version"], frozenset(raw["codes"])


REASON_CODES_VERSION, REASON_CODES = _load_reason_codes()

DEFECT_REASON = {
    DefectKind.CodeDefect: "CODE_DEFECT",
    DefectKind.ChartDefect: "CHART_DEFECT",
    DefectKind.IntentDefect: "INTENT_DEFECT",
}
CRITIC_LAYER = {
    RoleKind.CodeCritic: Layer.L1Code,
    RoleKind.ChartCritic: Layer.L1Chart,
    RoleKind.OutputCritic: Layer.L2Output,
}

# consecutive rejections before a writer is moved up a tier
ESCALATION_THRESHOLD = 2


class CascadeError(Exception):
    pass


class LayerMismatch(CascadeError):
    pass


class RetriesExhausted(CascadeError):
    pass


def reason(code: str, ref: str = "") -> Reason:
    if code not in REASON_CODES:
        raise CascadeError(f"unregistered reason code {code}")
    return Reason(code, ref)


# ---------------------------------------------------------------------------
# evaluation


def _caught(critic: AgentInstance, defect, p: float) -> bool:
    # a critic that has seen a defect once keeps seeing it (or missing it)
    hit = critic.catches.get(defect.id)
    if hit is None:
        rng = critic.rng
        rho = critic.profile.layer_correlation
        u = defect.subtlety if rho > 0 and rng.random() < rho else rng.random()
        hit = u < p
        critic.catches[defect.id] = hit
    return hit


def _guardrail(c: AcceptanceCriterion) -> bool:
    return c.predicate.kind is PredicateKind.Policy and c.predicate.args.get("guardrail", False)


def _judge(critic: AgentInstance, layer: Layer, artifacts: Sequence[ArtifactPayload],
           criteria: Sequence[AcceptanceCriterion], checked: ArtifactPayload) -> Verdict:
    reasons: list[Reason] = []
    escalate = False
    for c in criteria:
        if not c.check(checked):
            reasons.append(Reason("CRITERION_FAILED", c.id))
            escalate = escalate or _guardrail(c)
    if checked.failure and layer is not Layer.L2Output:
        reasons.append(Reason("EXECUTION_FAILED", checked.failure))
    target = LAYER_DEFECT[layer]
    p = critic.profile.detectable_given_layer.get(LAYER_PHASE[layer], 0.0)
    for art in artifacts:
        for d in art.defects:
            if d.kind is target and _caught(critic, d, p):
                ref = d.id if layer is not Layer.L2Output else f"{art.ref}#{d.id}"
                reasons.append(Reason(DEFECT_REASON[d.kind], ref))
    fpr = critic.profile.false_positive_rate
    if not reasons and fpr > 0 and critic.rng.random() < fpr:
        reasons.append(Reason("QUALITY_CONCERN", checked.ref))
    decision = Decision.Escalate if escalate else (Decision.Reject if reasons else Decision.Approve)
    return Verdict(decision, tuple(reasons), critic.role, layer,
                   tuple(c.id for c in criteria), critic.id, checked.step_id)


def evaluate(critic: AgentInstance, artifact: ArtifactPayload,
             criteria: Sequence[AcceptanceCriterion]) -> Verdict:
    """One critic's verdict on one artifact.

    Criteria are checked deterministically; defects of the kind this critic's
    layer can see are caught with the critic's detection probability.
    """
    layer = CRITIC_LAYER.get(critic.role.kind)
    if layer is None:
        raise LayerMismatch(f"{critic.role} is not a critic")
    if layer is Layer.L1Chart and artifact.kind is not StepKind.Chart:
        raise LayerMismatch("chart critique applies to Chart artifacts only")
    if critic.id == artifact.producer:
        raise CascadeError("an agent cannot certify its own artifact")
    return _judge(critic, layer, [artifact], criteria, artifact)


def l1_critics(critics: Iterable[AgentInstance], artifact: ArtifactPayload) -> list[AgentInstance]:
    out = []
    for c in critics:
        k = c.role.kind
        if k is RoleKind.CodeCritic or (k is RoleKind.ChartCritic and artifact.kind is StepKind.Chart):
            out.append(c)
    return out


def aggregate(verdicts: Sequence[Verdict]) -> tuple[Decision, tuple[Reason, ...]]:
    """Unanimous AND with merged feedback."""
    if any(v.decision is Decision.Escalate for v in verdicts):
        decision = Decision.Escalate
    elif all(v.decision is Decision.Approve for v in verdicts):
        return Decision.Approve, ()
    else:
        decision = Decision.Reject
    merged = tuple(r for v in verdicts for r in v.reasons)
    return decision, merged


def final_step(plan: ExecutionPlan) -> int:
    return topological_order(plan)[-1]


def outer_gate(outputs: Mapping[int, ArtifactPayload], output_critic: AgentInstance,
               plan: ExecutionPlan) -> Verdict:
    """Output critique over the assembled result set."""
    if output_critic.role.kind is not RoleKind.OutputCritic:
        raise LayerMismatch(f"{output_critic.role} cannot run the output gate")
    missing = [s.id for s in plan.steps if s.id not in outputs]
    if missing:
        raise CascadeError(f"steps {missing} have no approved output")
    if any(a.producer == output_critic.id for a in outputs.values()):
        raise CascadeError("an agent cannot certify its own artifact")
    final = outputs[final_step(plan)]
    arts = [outputs[k] for k in sorted(outputs)]
    return _judge(output_critic, Layer.L2Output, arts, plan.criteria_for(plan.plan_criteria), final)


def steps_to_rerun(verdict: Verdict, plan: ExecutionPlan) -> list[int]:
    """Steps an output rejection sends back to their teams (with dependents)."""
    cited: set[int] = set()
    for r in verdict.reasons:
        if r.ref.startswith("artifact:s"):
            cited.add(int(r.ref[len("artifact:s"):].split("/")[0]))
    if not cited:
        cited.add(final_step(plan))
    return sorted(plan.descendants(cited))


# ---------------------------------------------------------------------------
# closed-form cascade


@dataclass(frozen=True)
class CascadeModel:
    p_error: float
    p_catch_inner: float
    p_catch_outer: float

    def __post_init__(self):
        for name in ("p_error", "p_catch_inner", "p_catch_outer"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0) or math.isnan(v):
                raise CascadeError(f"{name} must be a probability, got {v}")

    def to_dict(self) -> dict:
        return {"p_error": self.p_error, "p_catch_inner": self.p_catch_inner, "p_catch_outer": self.p_catch_outer}


def expected_escape_rate(model: CascadeModel, extra_layers: Sequence[float] = ()) -> float:
    """Probability a session error survives every layer (independent layers)."""
    rate = model.p_error * (1.0 - model.p_catch_inner) * (1.0 - model.p_catch_outer)
    for catch in extra_layers:
        rate *= 1.0 - catch
    return rate


# ---------------------------------------------------------------------------
# the inner loop


class LoopStatus(str, enum.Enum):
    Running = "Running"
    Approved = "Approved"
    Exhausted = "Exhausted"
    Escalated = "Escalated"


class Team(Protocol):
    """What the inner loop needs from whoever hosts it."""

    def writer_for(self, step: PlanStep) -> AgentInstance: ...
    def replace_writer(self, step: PlanStep, agent: AgentInstance) -> None: ...
    def produce(self, writer: AgentInstance, step: PlanStep, feedback, prior, attempt: int) -> ArtifactPayload: ...
    def execute(self, artifact: ArtifactPayload) -> ArtifactPayload: ...
    def critics_for(self, artifact: ArtifactPayload) -> list[AgentInstance]: ...
    def critique(self, critics, artifact: ArtifactPayload, criteria) -> list[Verdict]: ...
    def criteria_for(self, step: PlanStep) -> list[AcceptanceCriterion]: ...


def after_rejection(writer: AgentInstance, threshold: int = ESCALATION_THRESHOLD) -> AgentInstance:
    """Bump the rejection streak; promote or switch vendor once it hits ``threshold``."""
    writer.rejections += 1
    if writer.rejections < threshold:
        return writer
    try:
        return escalate_tier(writer)
    except AlreadySenior:
        return switch_vendor(writer)


@dataclass
class InnerLoop:
    step_id: int
    attempt: int = 0
    rounds: int = 0
    retries: int = 0
    feedback: tuple[Reason, ...] = ()
    prior: ArtifactPayload | None = None
    status: LoopStatus = LoopStatus.Running
    final: ArtifactPayload | None = None
    last_reasons: tuple[Reason, ...] = ()
    threshold: int = ESCALATION_THRESHOLD

    def iterate(self, team, step: PlanStep) -> LoopStatus:
        """One produce -> execute -> critique round."""
        if self.status is not LoopStatus.Running:
            raise CascadeError(f"loop for step {self.step_id} already {self.status.value}")
        writer = team.writer_for(step)
        art = team.produce(writer, step, self.feedback, self.prior, self.attempt)
        self.attempt += 1
        art = team.execute(art)
        critics = team.critics_for(art)
        if not critics:
            self.status, self.final = LoopStatus.Approved, art
            return self.status
        verdicts = team.critique(critics, art, team.criteria_for(step))
        self.rounds += 1
        decision, reasons = aggregate(verdicts)
        self.last_reasons = reasons
        if decision is Decision.Approve:
            writer.rejections = 0
            self.status, self.final = LoopStatus.Approved, art
        elif decision is Decision.Escalate:
            self.status = LoopStatus.Escalated
        else:
            self.feedback, self.prior = reasons, art
            team.replace_writer(step, after_rejection(writer, self.threshold))
            if self.retries >= step.max_retries:
                self.status = LoopStatus.Exhausted
            else:
                self.retries += 1
        return self.status

    def state(self) -> dict:
        from .model import payload_to_dict
        return {
            "step_id": self.step_id, "attempt": self.attempt, "rounds": self.rounds, "retries": self.retries,
            "feedback": [[r.code, r.ref] for r in self.feedback],
            "prior": None if self.prior is None else payload_to_dict(self.prior),
            "status": self.status.value,
            "final": None if self.final is None else payload_to_dict(self.final),
            "last_reasons": [[r.code, r.ref] for r in self.last_reasons],
            "threshold": self.threshold,
        }

    @classmethod
    def from_state(cls, s) -> "InnerLoop":
        from .model import payload_from_dict
        return cls(
            step_id=s["step_id"], attempt=s["attempt"], rounds=s["rounds"], retries=s["retries"],
            feedback=tuple(Reason(c, r) for c, r in s["feedback"]),
            prior=None if s["prior"] is None else payload_from_dict(s["prior"]),
            status=LoopStatus(s["status"]),
            final=None if s["final"] is None else payload_from_dict(s["final"]),
            last_reasons=tuple(Reason(c, r) for c, r in s["last_reasons"]),
            threshold=s["threshold"],
        )


@dataclass
class LocalTeam:
    """Minimal host for running an inner loop outside a session."""

    writer: AgentInstance
    critics: Sequence[AgentInstance]
    criteria: Sequence[AcceptanceCriterion]
    writers_seen: list = field(default_factory=list)

    def writer_for(self, step):
        return self.writer

    def replace_writer(self, step, agent):
        self.writer = agent
        self.writers_seen.append(agent)

    def produce(self, writer, step, feedback, prior, attempt):
        return produce(writer, step, feedback, prior, attempt)

    def execute(self, artifact):
        n = artifact.row_count
        return replace(artifact, executed=True, non_null={f: n for f in artifact.fields})

    def critics_for(self, artifact):
        return l1_critics(self.critics, artifact)

    def critique(self, critics, artifact, criteria):
        return [evaluate(c, artifact, criteria) for c in critics]

    def criteria_for(self, step):
        return list(self.criteria)


def inner_loop(step: PlanStep, writer: AgentInstance, critics: Sequence[AgentInstance],
               criteria: Sequence[AcceptanceCriterion] = (), team=None) -> tuple[ArtifactPayload, int]:
    """Run write -> execute -> critique until unanimous approval.

    Returns the approved artifact and the number of critique rounds. Raises
    ``RetriesExhausted`` when the step's retry cap is hit.
    """
    team = team or LocalTeam(writer, critics, criteria)
    loop = InnerLoop(step.id)
    while loop.status is LoopStatus.Running:
        loop.iterate(team, step)
    if loop.status is LoopStatus.Exhausted:
        raise RetriesExhausted(f"step {step.id} rejected {loop.rounds} times")
    if loop.status is LoopStatus.Escalated:
        raise RetriesExhausted(f"step {step.id} escalated: {', '.join(map(str, loop.last_reasons))}")
    return loop.final, loop.rounds
