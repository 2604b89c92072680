"""Typed message passing with (role, phase) visibility filtering.

Dispatch is synchronous and ordered by envelope id. An envelope is delivered at
send time to every registered agent whose ``(role, current phase)`` is in its
allow-list; pairs naming a later phase are held and delivered when the session
enters that phase. Pairs naming an earlier phase can never be satisfied.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

from .model import (
    AgentRole,
    ArtifactPayload,
    Decision,
    Phase,
    RoleKind,
    SchemaViolation,
    SummaryPayload,
    VerdictPayload,
    payload_from_dict,
    payload_to_dict,
    PAYLOAD_TYPES,
)
from .session import EventKind, SessionLog

Visibility = frozenset  # of (RoleKind, Phase)

SESSION_SCOPE = "session"


class KernelError(Exception):
    pass


class EmptyVisibility(KernelError):
    """No registered agent can ever receive the envelope."""


class MixedScope(KernelError):
    pass


def visibility(*pairs: tuple) -> frozenset:
    out = set()
    for kind, phase in pairs:
        kind = kind if isinstance(kind, RoleKind) else RoleKind(kind)
        phase = phase if isinstance(phase, Phase) else Phase[phase]
        out.add((kind, phase))
    return frozenset(out)


def load_visibility_matrix(path=None) -> dict[str, frozenset]:
    if path is None:
        text = resources.files("rivals").joinpath("data/visibility.json").read_text()
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    raw = json.loads(text)
    return {name: visibility(*map(tuple, pairs)) for name, pairs in raw["channels"].items()}


DEFAULT_VISIBILITY = load_visibility_matrix()

_INDEX: dict[frozenset, dict] = {}
_PAYLOAD_CLASSES = frozenset(PAYLOAD_TYPES.values())
_KIND_VALUE = {k: k.value for k in RoleKind}


def _index(vis: frozenset) -> dict:
    """kind -> (phases, latest phase); allow-lists are few and reused."""
    idx = _INDEX.get(vis)
    if idx is None:
        phases: dict = {}
        for k, p in vis:
            phases.setdefault(k, set()).add(p)
        idx = {k: (frozenset(ps), max(ps)) for k, ps in phases.items()}
        if len(_INDEX) < 4096:
            _INDEX[vis] = idx
    return idx


@dataclass(frozen=True, slots=True)
class MessageEnvelope:
    id: int
    sender: AgentRole
    visibility: frozenset
    phase: Phase
    payload: object
    causal_parents: tuple[int, ...] = ()
    scope: str = SESSION_SCOPE

    def __post_init__(self):
        if type(self.payload) not in _PAYLOAD_CLASSES:
            raise SchemaViolation(f"untyped payload {type(self.payload).__name__}")
        if not isinstance(self.visibility, frozenset):
            raise SchemaViolation("visibility must be a frozenset of (role, phase) pairs")
        if self.visibility not in _INDEX:  # indexed allow-lists were validated already
            self._check_pairs()
        cp = self.causal_parents
        if cp and (max(cp) >= self.id or min(cp) < 0):
            raise SchemaViolation(f"envelope {self.id} names a non-earlier causal parent")

    def _check_pairs(self):
        for pair in self.visibility:
            if not (isinstance(pair, tuple) and len(pair) == 2
                    and isinstance(pair[0], RoleKind) and isinstance(pair[1], Phase)):
                raise SchemaViolation(f"bad visibility entry {pair!r}")
        _index(self.visibility)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "sender": self.sender.to_dict(),
            "visibility": sorted([k.value, p.name] for k, p in self.visibility),
            "phase": self.phase.name,
            "payload": payload_to_dict(self.payload),
            "causal_parents": list(self.causal_parents),
            "scope": self.scope,
        }

    @classmethod
    def from_dict(cls, d) -> "MessageEnvelope":
        return cls(
            id=d["id"],
            sender=AgentRole.from_dict(d["sender"]),
            visibility=visibility(*map(tuple, d["visibility"])),
            phase=Phase[d["phase"]],
            payload=payload_from_dict(d["payload"]),
            causal_parents=tuple(d["causal_parents"]),
            scope=d.get("scope", SESSION_SCOPE),
        )


@dataclass(frozen=True, slots=True)
class Registration:
    agent_id: str
    role: AgentRole
    team: str | None = None  # None: serves every scope

    def accepts(self, scope: str) -> bool:
        return self.team is None or scope == SESSION_SCOPE or self.team == scope

    def to_dict(self) -> dict:
        return {"agent_id": self.agent_id, "role": self.role.to_dict(), "team": self.team}

    @classmethod
    def from_dict(cls, d) -> "Registration":
        return cls(d["agent_id"], AgentRole.from_dict(d["role"]), d.get("team"))


@dataclass
class _Pending:
    envelope: MessageEnvelope
    delivered: set = field(default_factory=set)


# registry snapshot -> {(allow-list, scope, phase): (recipients now, held for later)}
# sessions of one cohort register identical agents, so routes are shared
_ROUTES: dict[tuple, dict] = {}


def _routes_for(registry: tuple) -> dict:
    table = _ROUTES.get(registry)
    if table is None:
        if len(_ROUTES) > 2048:
            _ROUTES.clear()
        table = _ROUTES[registry] = {}
    return table


class Kernel:
    """Per-session dispatcher. Not shared across sessions."""

    def __init__(self, log: SessionLog, phase: Phase = Phase.Planning):
        self.log = log
        self.phase = phase
        self.registry: list[Registration] = []
        self.next_id = 0
        self._pending: list[_Pending] = []
        self._routes: dict = _routes_for(())

    # -- registry

    def register(self, agent_id: str, role: AgentRole, team: str | None = None) -> None:
        self.registry.append(Registration(agent_id, role, team))
        self._routes = _routes_for(tuple(self.registry))

    def _route(self, vis: frozenset, scope: str, phase: Phase, registry) -> tuple[list, bool]:
        idx = _index(vis)
        now = []
        later = False
        for reg in registry:
            if reg.team is not None and scope != SESSION_SCOPE and reg.team != scope:
                continue
            ent = idx.get(reg.role.kind)
            if ent is None:
                continue
            if phase in ent[0]:
                now.append(reg)
            elif ent[1] > phase:
                later = True
        return now, later

    # -- envelopes

    def envelope(self, sender: AgentRole, vis: frozenset, payload, parents: Iterable[int] = (),
                 scope: str = SESSION_SCOPE) -> MessageEnvelope:
        env = MessageEnvelope(self.next_id, sender, vis, self.phase, payload, tuple(parents), scope)
        self.next_id += 1
        return env

    def dispatch(self, env: MessageEnvelope, registry: Sequence[Registration] | None = None) -> list[AgentRole]:
        """Deliver ``env`` now, queue it for later phases, and log both."""
        if env.phase is not self.phase:
            raise SchemaViolation(f"envelope {env.id} stamped {env.phase.name}, session is in {self.phase.name}")
        phase = self.phase
        if registry is None:
            key = (env.visibility, env.scope, phase)
            route = self._routes.get(key)
            if route is None:
                route = self._routes[key] = self._route(env.visibility, env.scope, phase, self.registry)
            now, later = route
        else:
            now, later = self._route(env.visibility, env.scope, phase, registry)
        self.log.append(EventKind.MessageSent, phase, {"envelope": env})
        if not now and not later:
            raise EmptyVisibility(f"envelope {env.id} has no reachable recipient from {phase.name}")
        for reg in now:
            self._deliver(env, reg)
        if later:
            self._pending.append(_Pending(env, {r.agent_id for r in now}))
        return [r.role for r in now]

    def _deliver(self, env: MessageEnvelope, reg: Registration) -> None:
        self.log.append(EventKind.MessageDelivered, self.phase,
                        {"message": env.id, "agent": reg.agent_id, "role": _KIND_VALUE[reg.role.kind]})

    def advance(self, phase: Phase) -> None:
        """Enter ``phase`` and flush held deliveries addressed to it."""
        self.phase = phase
        keep = []
        for pend in self._pending:
            env = pend.envelope
            idx = _index(env.visibility)
            hold = False
            for reg in self.registry:
                if reg.agent_id in pend.delivered or not reg.accepts(env.scope):
                    continue
                ent = idx.get(reg.role.kind)
                if ent is None:
                    continue
                if phase in ent[0]:
                    self._deliver(env, reg)
                    pend.delivered.add(reg.agent_id)
                elif ent[1] > phase:
                    # hold on only while some registered agent could still receive it
                    hold = True
            if hold:
                keep.append(pend)
        self._pending = keep

    # -- checkpoint support

    def state(self) -> dict:
        return {
            "phase": self.phase.name,
            "next_id": self.next_id,
            "registry": [r.to_dict() for r in self.registry],
            "pending": [{"envelope": p.envelope.to_dict(), "delivered": sorted(p.delivered)} for p in self._pending],
        }

    @classmethod
    def from_state(cls, state, log: SessionLog) -> "Kernel":
        k = cls(log, Phase[state["phase"]])
        k.next_id = state["next_id"]
        k.registry = [Registration.from_dict(r) for r in state["registry"]]
        k._routes = _routes_for(tuple(k.registry))
        k._pending = [_Pending(MessageEnvelope.from_dict(p["envelope"]), set(p["delivered"])) for p in state["pending"]]
        return k


def relay_summary(team_messages: Sequence[MessageEnvelope], summarizer: AgentRole, envelope_id: int,
                  phase: Phase = Phase.Execution, vis: frozenset | None = None) -> MessageEnvelope:
    """Condense a team transcript into one upward envelope.

    Only the artifact that earned approval is described; rejected attempts and
    their verdicts contribute a causal edge and nothing else.
    """
    if summarizer.kind is not RoleKind.Summarizer:
        raise SchemaViolation(f"{summarizer} cannot relay summaries")
    scopes = {m.scope for m in team_messages}
    if len(scopes) > 1:
        raise MixedScope(f"transcript spans scopes {sorted(scopes)}")
    scope = scopes.pop() if scopes else SESSION_SCOPE

    artifacts = {m.id: m.payload for m in team_messages if isinstance(m.payload, ArtifactPayload)}
    approved_by: dict[int, list[int]] = {}
    rejected: set[int] = set()
    for m in team_messages:
        if isinstance(m.payload, VerdictPayload):
            target = max((p for p in m.causal_parents if p in artifacts), default=None)
            if target is None:
                continue
            if m.payload.verdict.decision is Decision.Approve:
                approved_by.setdefault(target, []).append(m.id)
            else:
                rejected.add(target)
    accepted = [i for i in approved_by if i not in rejected]
    content: dict = {}
    provenance: tuple[int, ...] = ()
    if accepted:
        art_id = max(accepted)
        art = artifacts[art_id]
        content = {
            "step_id": art.step_id,
            "kind": art.kind.value,
            "fields": list(art.fields),
            "row_count": art.row_count,
            "values": dict(art.values),
            "handle": art.handle,
            "artifact_ref": art.ref,
        }
        provenance = (art_id, *approved_by[art_id])
    if vis is None:
        vis = DEFAULT_VISIBILITY["team_summary"]
    parents = tuple(sorted(m.id for m in team_messages))
    return MessageEnvelope(envelope_id, summarizer, vis, phase,
                           SummaryPayload(scope, provenance, content), parents, SESSION_SCOPE)
