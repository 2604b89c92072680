"""Stochastic stand-in agents and model-tier escalation.

Writers draw hidden defects from their profile; critics draw whether they can
see a given defect. Every agent owns an independent ``random.Random`` stream
derived from the session seed and its id, so draws are insensitive to the order
in which agents act within a phase.
"""
from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Protocol, Sequence

from .model import AgentRole, ArtifactPayload, Defect, DefectKind, Phase, RoleKind, StepKind


class ProfileError(ValueError):
    pass


class AlreadySenior(Exception):
    """Escalation requested on a Senior instance; caller should switch vendor."""


class Tier(str, enum.Enum):
    Junior = "Junior"
    Senior = "Senior"


def _prob(name: str, v: float) -> float:
    v = float(v)
    if not 0.0 <= v <= 1.0:
        raise ProfileError(f"{name} must be in [0, 1], got {v}")
    return v


@dataclass(frozen=True)
class StochasticProfile:
    error_rate: float = 0.0
    defect_mix: Mapping[DefectKind, float] = field(default_factory=lambda: {DefectKind.CodeDefect: 1.0})
    detectable_given_layer: Mapping[Phase, float] = field(
        default_factory=lambda: {Phase.InnerCritique: 1.0, Phase.OuterCritique: 1.0})
    false_positive_rate: float = 0.0
    tier: Tier = Tier.Junior
    cost_per_call: float = 1.0
    time_per_call: float = 1.0
    # probability an already-flagged defect survives one feedback round
    repair_factor: float = 0.5
    # per-retry overrides of repair_factor, retry 1 first
    repair_schedule: tuple[float, ...] = ()
    # chance a critic reuses the defect's own draw instead of a fresh one
    layer_correlation: float = 0.0

    def __post_init__(self):
        for name in ("error_rate", "false_positive_rate", "repair_factor", "layer_correlation"):
            _prob(name, getattr(self, name))
        for v in self.repair_schedule:
            _prob("repair_schedule", v)
        for ph, v in self.detectable_given_layer.items():
            _prob(f"detectable_given_layer[{ph}]", v)
        if any(w < 0 for w in self.defect_mix.values()) or not sum(self.defect_mix.values()) > 0:
            raise ProfileError("defect_mix needs non-negative weights with a positive sum")
        if self.cost_per_call < 0 or self.time_per_call < 0:
            raise ProfileError("costs must be non-negative")

    def persistence(self, retry: int) -> float:
        if 1 <= retry <= len(self.repair_schedule):
            return self.repair_schedule[retry - 1]
        return self.repair_factor

    def to_dict(self) -> dict:
        return {
            "error_rate": self.error_rate,
            "defect_mix": {k.value: v for k, v in self.defect_mix.items()},
            "detectable_given_layer": {k.name: v for k, v in self.detectable_given_layer.items()},
            "false_positive_rate": self.false_positive_rate,
            "tier": self.tier.value,
            "cost_per_call": self.cost_per_call,
            "time_per_call": self.time_per_call,
            "repair_factor": self.repair_factor,
            "repair_schedule": list(self.repair_schedule),
            "layer_correlation": self.layer_correlation,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StochasticProfile":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ProfileError(f"unknown profile keys {sorted(unknown)}")
        kw = dict(d)
        if "defect_mix" in kw:
            kw["defect_mix"] = {DefectKind(k): float(v) for k, v in kw["defect_mix"].items()}
        if "detectable_given_layer" in kw:
            kw["detectable_given_layer"] = {Phase[k]: float(v) for k, v in kw["detectable_given_layer"].items()}
        if "tier" in kw:
            kw["tier"] = Tier(kw["tier"])
        if "repair_schedule" in kw:
            kw["repair_schedule"] = tuple(float(x) for x in kw["repair_schedule"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ProfileError(str(exc)) from None


@dataclass(frozen=True)
class RoleProfile:
    """Junior profile plus the Senior it escalates to."""

    junior: StochasticProfile
    senior: StochasticProfile | None = None

    def __post_init__(self):
        if self.senior is None:
            return
        if self.senior.error_rate > self.junior.error_rate:
            raise ProfileError("a Senior tier may not be more error-prone than its Junior")
        if self.senior.tier is not Tier.Senior or self.junior.tier is not Tier.Junior:
            raise ProfileError("tier labels do not match their slots")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RoleProfile":
        if "junior" not in d:
            return cls(StochasticProfile.from_dict(d))
        senior = d.get("senior")
        if senior is not None:
            senior = StochasticProfile.from_dict({"tier": "Senior", **senior})
        return cls(StochasticProfile.from_dict(d["junior"]), senior)

    def to_dict(self) -> dict:
        out = {"junior": self.junior.to_dict()}
        if self.senior is not None:
            out["senior"] = self.senior.to_dict()
        return out


def _rng_state(rng: random.Random) -> list:
    version, internal, gauss = rng.getstate()
    return [version, list(internal), gauss]


def _rng_from_state(state) -> random.Random:
    rng = random.Random()
    version, internal, gauss = state
    rng.setstate((version, tuple(internal), gauss))
    return rng


@dataclass
class AgentInstance:
    id: str
    role: AgentRole
    profile: StochasticProfile
    rng_stream: str
    vendor_tag: str
    _rng: random.Random | None = field(repr=False, default=None)
    senior_profile: StochasticProfile | None = None
    fallback_vendor: str | None = None
    rejections: int = 0
    produced: int = 0
    catches: dict = field(default_factory=dict)

    @property
    def rng(self) -> random.Random:
        # seeded on first draw; most critics in a cohort never draw
        if self._rng is None:
            self._rng = random.Random(self.rng_stream)
        return self._rng

    @property
    def tier(self) -> Tier:
        return self.profile.tier

    def state(self) -> dict:
        return {
            "id": self.id,
            "role": self.role.to_dict(),
            "profile": self.profile.to_dict(),
            "rng_stream": self.rng_stream,
            "vendor_tag": self.vendor_tag,
            "rng": _rng_state(self.rng),
            "senior_profile": None if self.senior_profile is None else self.senior_profile.to_dict(),
            "fallback_vendor": self.fallback_vendor,
            "rejections": self.rejections,
            "produced": self.produced,
            "catches": dict(sorted(self.catches.items())),
        }

    @classmethod
    def from_state(cls, s: Mapping) -> "AgentInstance":
        return cls(
            id=s["id"],
            role=AgentRole.from_dict(s["role"]),
            profile=StochasticProfile.from_dict(s["profile"]),
            rng_stream=s["rng_stream"],
            vendor_tag=s["vendor_tag"],
            _rng=_rng_from_state(s["rng"]),
            senior_profile=None if s["senior_profile"] is None else StochasticProfile.from_dict(s["senior_profile"]),
            fallback_vendor=s["fallback_vendor"],
            rejections=s["rejections"],
            produced=s["produced"],
            catches=dict(s["catches"]),
        )


def spawn(agent_id: str, role: AgentRole, profile: RoleProfile | StochasticProfile, seed: int,
          vendor: str, fallback_vendor: str | None = None) -> AgentInstance:
    if isinstance(profile, StochasticProfile):
        profile = RoleProfile(profile)
    return AgentInstance(agent_id, role, profile.junior, f"{seed}/{agent_id}", vendor,
                         senior_profile=profile.senior, fallback_vendor=fallback_vendor)


def escalate_tier(agent: AgentInstance) -> AgentInstance:
    """Promote a Junior to its Senior profile, keeping role and rng lineage."""
    if agent.tier is Tier.Senior:
        raise AlreadySenior(agent.id)
    senior = agent.senior_profile
    if senior is None:
        # no configured senior: same behaviour, priced as a larger model
        senior = replace(agent.profile, tier=Tier.Senior,
                         cost_per_call=agent.profile.cost_per_call * 2,
                         time_per_call=agent.profile.time_per_call * 2)
    return replace(agent, profile=senior, rejections=0)


def switch_vendor(agent: AgentInstance) -> AgentInstance:
    if agent.fallback_vendor is None or agent.fallback_vendor == agent.vendor_tag:
        return replace(agent, rejections=0)
    return replace(agent, vendor_tag=agent.fallback_vendor, fallback_vendor=agent.vendor_tag, rejections=0)


# ---------------------------------------------------------------------------
# producing artifacts

# a writer skill turns (step, defects) into an executable program and the
# fields the artifact will expose; the default skill emits no program
WriterSkill = Callable[[Any, Sequence[Defect]], tuple[tuple, tuple[str, ...]]]

_SKILLS: dict[str, WriterSkill] = {}


def register_skill(name: str):
    def deco(fn: WriterSkill) -> WriterSkill:
        _SKILLS[name] = fn
        return fn
    return deco


def skill_for(step) -> WriterSkill | None:
    return _SKILLS.get(step.params.get("skill", ""))


def _pick_kind(rng: random.Random, mix: Mapping[DefectKind, float], step_kind: StepKind) -> DefectKind:
    items = [(k, w) for k, w in mix.items() if w > 0 and (k is not DefectKind.ChartDefect or step_kind is StepKind.Chart)]
    if not items:
        return DefectKind.CodeDefect
    total = sum(w for _, w in items)
    u = rng.random() * total
    for k, w in items:
        u -= w
        if u < 0:
            return k
    return items[-1][0]


def produce(agent: AgentInstance, step, feedback: Sequence | None = None,
            prior: ArtifactPayload | None = None, attempt: int = 0) -> ArtifactPayload:
    """Write (not run) the artifact for ``step``.

    On a first attempt a defect appears with ``error_rate``. On a retry each
    defect of ``prior`` survives with the profile's repair persistence when
    feedback was given; retries never introduce new defects.
    """
    if agent.role.kind is not RoleKind.Writer:
        raise ProfileError(f"{agent.role} cannot produce artifacts")
    rng = agent.rng
    prof = agent.profile
    if prior is None:
        defects: tuple[Defect, ...] = ()
        if rng.random() < prof.error_rate:
            kind = _pick_kind(rng, prof.defect_mix, step.kind)
            defects = (Defect(f"{agent.id}#{agent.produced}", kind, rng.random()),)
    elif feedback:
        keep = prof.persistence(attempt)
        defects = tuple(d for d in prior.defects if rng.random() < keep)
    else:
        defects = prior.defects
    agent.produced += 1
    skill = skill_for(step)
    if skill is None:
        fields = tuple(step.params.get("fields", ()))
        program: tuple = ()
    else:
        program, fields = skill(step, defects)
    return ArtifactPayload(step_id=step.id, kind=step.kind, attempt=attempt, producer=agent.id,
                           fields=fields, program=program, defects=defects)


class ModelBackend(Protocol):
    """Adapter point for a real model provider. None ships with this package."""

    def produce(self, agent: AgentInstance, step, feedback: Sequence | None,
                prior: ArtifactPayload | None, attempt: int) -> ArtifactPayload: ...

    def evaluate(self, critic: AgentInstance, artifact: ArtifactPayload, criteria: Sequence) -> Any: ...
