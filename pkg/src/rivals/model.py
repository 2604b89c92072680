"""Core value types shared by every layer of the orchestration kernel.

Everything here is immutable and JSON-serializable through ``to_dict`` /
``from_dict`` so that envelopes, verdicts and artifacts can be written into the
session log and into checkpoints without a separate schema layer.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Mapping

SCHEMA_VERSION = 1


class SchemaViolation(ValueError):
    """A payload or envelope failed structural validation."""


class RoleKind(str, enum.Enum):
    PrePlanner = "PrePlanner"
    Planner = "Planner"
    PlanRefiner = "PlanRefiner"
    PlanCritic = "PlanCritic"
    SMEConsultant = "SMEConsultant"
    Coordinator = "Coordinator"
    PlanExecutor = "PlanExecutor"
    Writer = "Writer"
    CodeExecutor = "CodeExecutor"
    CodeCritic = "CodeCritic"
    ChartCritic = "ChartCritic"
    OutputCritic = "OutputCritic"
    Summarizer = "Summarizer"
    UserProxy = "UserProxy"
    Guardrails = "Guardrails"


CRITIC_KINDS = frozenset({RoleKind.CodeCritic, RoleKind.ChartCritic, RoleKind.OutputCritic})
_SPECIALIZABLE = frozenset({RoleKind.Writer, RoleKind.Summarizer})


@dataclass(frozen=True, slots=True)
class AgentRole:
    kind: RoleKind
    specialization: str | None = None

    def __post_init__(self):
        if not isinstance(self.kind, RoleKind):
            raise SchemaViolation(f"unknown role kind {self.kind!r}")
        if self.specialization is not None and self.kind not in _SPECIALIZABLE:
            raise SchemaViolation(f"{self.kind.value} does not take a specialization")

    def __str__(self) -> str:
        if self.specialization:
            return f"{self.kind.value}[{self.specialization}]"
        return self.kind.value

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "specialization": self.specialization}

    @classmethod
    def from_dict(cls, d: Mapping) -> "AgentRole":
        return cls(RoleKind(d["kind"]), d.get("specialization"))


class Phase(enum.IntEnum):
    """Session phases, in stage order."""

    Planning = 0
    Approval = 1
    Execution = 2
    InnerCritique = 3
    OuterCritique = 4
    Synthesis = 5
    Escalation = 6


class StepKind(str, enum.Enum):
    Extract = "Extract"
    Transform = "Transform"
    Reconcile = "Reconcile"
    Chart = "Chart"
    Synthesize = "Synthesize"


class DefectKind(str, enum.Enum):
    CodeDefect = "CodeDefect"
    ChartDefect = "ChartDefect"
    IntentDefect = "IntentDefect"


class Decision(str, enum.Enum):
    Approve = "Approve"
    Reject = "Reject"
    Escalate = "Escalate"


class Layer(str, enum.Enum):
    L1Code = "L1Code"
    L1Chart = "L1Chart"
    L2Output = "L2Output"


LAYER_CRITIC = {
    Layer.L1Code: RoleKind.CodeCritic,
    Layer.L1Chart: RoleKind.ChartCritic,
    Layer.L2Output: RoleKind.OutputCritic,
}
LAYER_PHASE = {
    Layer.L1Code: Phase.InnerCritique,
    Layer.L1Chart: Phase.InnerCritique,
    Layer.L2Output: Phase.OuterCritique,
}
# which defect kind each layer is able to see at all
LAYER_DEFECT = {
    Layer.L1Code: DefectKind.CodeDefect,
    Layer.L1Chart: DefectKind.ChartDefect,
    Layer.L2Output: DefectKind.IntentDefect,
}


@dataclass(frozen=True, slots=True)
class Defect:
    """Hidden ground-truth flaw carried by an artifact.

    ``subtlety`` is a uniform draw made when the defect is created; critics
    may reuse it (layer correlation knob) instead of drawing fresh.
    """

    id: str
    kind: DefectKind
    subtlety: float

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind.value, "subtlety": self.subtlety}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Defect":
        return cls(d["id"], DefectKind(d["kind"]), float(d["subtlety"]))


@dataclass(frozen=True, slots=True)
class Reason:
    code: str
    ref: str = ""

    def __str__(self) -> str:
        return f"{self.code}:{self.ref}" if self.ref else self.code


@dataclass(frozen=True, slots=True)
class Verdict:
    decision: Decision
    reasons: tuple[Reason, ...]
    critic: AgentRole
    layer: Layer
    evaluated_criteria: tuple[str, ...]
    critic_id: str = ""
    step_id: int | None = None

    def __post_init__(self):
        if self.decision is Decision.Reject and not self.reasons:
            raise SchemaViolation("a Reject verdict needs at least one reason")
        if LAYER_CRITIC[self.layer] is not self.critic.kind:
            raise SchemaViolation(f"{self.critic} cannot issue {self.layer.value} verdicts")

    @property
    def approved(self) -> bool:
        return self.decision is Decision.Approve

    def to_dict(self) -> dict:
        return {
            "decision": self.decision.value,
            "reasons": [[r.code, r.ref] for r in self.reasons],
            "critic": self.critic.to_dict(),
            "layer": self.layer.value,
            "evaluated_criteria": list(self.evaluated_criteria),
            "critic_id": self.critic_id,
            "step_id": self.step_id,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Verdict":
        return cls(
            Decision(d["decision"]),
            tuple(Reason(c, r) for c, r in d["reasons"]),
            AgentRole.from_dict(d["critic"]),
            Layer(d["layer"]),
            tuple(d["evaluated_criteria"]),
            d.get("critic_id", ""),
            d.get("step_id"),
        )


# ---------------------------------------------------------------------------
# payloads


def _check_version(version: int) -> None:
    if version != SCHEMA_VERSION:
        raise SchemaViolation(f"unsupported payload schema version {version}")


@dataclass(frozen=True, slots=True)
class PlanPayload:
    plan: Mapping[str, Any]
    version: int = SCHEMA_VERSION
    TYPE = "plan"

    def __post_init__(self):
        _check_version(self.version)
        if not isinstance(self.plan, Mapping) or "steps" not in self.plan:
            raise SchemaViolation("plan payload must carry a serialized plan")

    def to_dict(self) -> dict:
        return {"plan": dict(self.plan)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PlanPayload":
        return cls(d["plan"])


@dataclass(frozen=True, slots=True)
class ArtifactPayload:
    """What a writer produced and the code executor ran, seen through summaries.

    ``non_null`` maps each field to its non-null count; ``values`` holds scalar
    results for single-row outputs. ``defects`` is simulator ground truth and is
    never inspected directly by agents.
    """

    step_id: int
    kind: StepKind
    attempt: int
    producer: str
    fields: tuple[str, ...] = ()
    row_count: int = 0
    non_null: Mapping[str, int] = field(default_factory=dict)
    values: Mapping[str, Any] = field(default_factory=dict)
    handle: str | None = None
    program: tuple = ()
    defects: tuple[Defect, ...] = ()
    executed: bool = False
    failure: str | None = None
    version: int = SCHEMA_VERSION
    TYPE = "artifact"

    def __post_init__(self):
        _check_version(self.version)
        if not isinstance(self.kind, StepKind):
            raise SchemaViolation(f"bad artifact kind {self.kind!r}")
        if self.attempt < 0 or self.row_count < 0:
            raise SchemaViolation("attempt and row_count must be non-negative")

    @property
    def ref(self) -> str:
        return f"artifact:s{self.step_id}/{self.attempt}"

    def to_dict(self) -> dict:
        return {
            "step_id": self.step_id,
            "kind": self.kind.value,
            "attempt": self.attempt,
            "producer": self.producer,
            "fields": list(self.fields),
            "row_count": self.row_count,
            "non_null": dict(self.non_null),
            "values": dict(self.values),
            "handle": self.handle,
            "program": list(self.program),
            "defects": [x.to_dict() for x in self.defects],
            "executed": self.executed,
            "failure": self.failure,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArtifactPayload":
        return cls(
            step_id=d["step_id"],
            kind=StepKind(d["kind"]),
            attempt=d["attempt"],
            producer=d["producer"],
            fields=tuple(d["fields"]),
            row_count=d["row_count"],
            non_null=dict(d["non_null"]),
            values=dict(d["values"]),
            handle=d["handle"],
            program=tuple(d["program"]),
            defects=tuple(Defect.from_dict(x) for x in d["defects"]),
            executed=d["executed"],
            failure=d.get("failure"),
        )


@dataclass(frozen=True, slots=True)
class VerdictPayload:
    verdict: Verdict
    version: int = SCHEMA_VERSION
    TYPE = "verdict"

    def __post_init__(self):
        _check_version(self.version)
        if not isinstance(self.verdict, Verdict):
            raise SchemaViolation("verdict payload must wrap a Verdict")

    def to_dict(self) -> dict:
        return {"verdict": self.verdict.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "VerdictPayload":
        return cls(Verdict.from_dict(d["verdict"]))


@dataclass(frozen=True, slots=True)
class SummaryPayload:
    """Upward relay of a team's approved result; never carries retry history."""

    scope: str
    provenance: tuple[int, ...]
    content: Mapping[str, Any]
    version: int = SCHEMA_VERSION
    TYPE = "summary"

    def __post_init__(self):
        _check_version(self.version)

    def to_dict(self) -> dict:
        return {"scope": self.scope, "provenance": list(self.provenance), "content": dict(self.content)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SummaryPayload":
        return cls(d["scope"], tuple(d["provenance"]), d["content"])


CONTROL_ACTIONS = frozenset(
    {"query", "approve", "refuse", "edit", "escalate", "replan", "present", "user_verdict", "feedback"}
)


@dataclass(frozen=True, slots=True)
class ControlPayload:
    action: str
    detail: Mapping[str, Any] = field(default_factory=dict)
    version: int = SCHEMA_VERSION
    TYPE = "control"

    def __post_init__(self):
        _check_version(self.version)
        if self.action not in CONTROL_ACTIONS:
            raise SchemaViolation(f"unknown control action {self.action!r}")

    def to_dict(self) -> dict:
        return {"action": self.action, "detail": dict(self.detail)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ControlPayload":
        return cls(d["action"], d.get("detail", {}))


PAYLOAD_TYPES = {
    cls.TYPE: cls for cls in (PlanPayload, ArtifactPayload, VerdictPayload, SummaryPayload, ControlPayload)
}


def payload_to_dict(payload) -> dict:
    d = payload.to_dict()
    d["type"] = payload.TYPE
    d["version"] = payload.version
    return d


def payload_from_dict(d: Mapping):
    try:
        cls = PAYLOAD_TYPES[d["type"]]
    except KeyError:
        raise SchemaViolation(f"unknown payload type {d.get('type')!r}") from None
    _check_version(d.get("version", -1))
    return cls.from_dict(d)
