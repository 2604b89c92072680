"""Event-sourced session log, checkpoint containers and lineage audits."""
from __future__ import annotations

import enum
import hashlib
import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, NamedTuple

from .model import Phase, Verdict, payload_from_dict, payload_to_dict

LOG_FORMAT = "rivals-session-log"
CHECKPOINT_FORMAT = "rivals-checkpoint"
LOG_VERSION = 1

# refs of these kinds are session inputs; every backward path must end at one
ROOT_PREFIXES = ("input:", "criterion:", "config:")


class UnknownRef(KeyError):
    pass


class CorruptCheckpoint(ValueError):
    pass


class EventKind(str, enum.Enum):
    MessageSent = "MessageSent"
    MessageDelivered = "MessageDelivered"
    ArtifactProduced = "ArtifactProduced"
    VerdictIssued = "VerdictIssued"
    CheckpointTaken = "CheckpointTaken"
    EscalationRaised = "EscalationRaised"
    CostIncurred = "CostIncurred"
    CitationRecorded = "CitationRecorded"


def is_root(ref: str) -> bool:
    return ref.startswith(ROOT_PREFIXES)


def _encode(obj):
    if hasattr(obj, "to_dict"):
        if hasattr(obj, "TYPE"):
            return payload_to_dict(obj)
        return obj.to_dict()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    if isinstance(obj, enum.Enum):
        return obj.value
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_encode)


class SessionEvent(NamedTuple):
    """One immutable log entry (a named tuple: cohorts append millions)."""

    index: int
    phase: Phase
    kind: EventKind
    payload: Mapping[str, Any]
    lineage_edges: tuple[tuple[str, str], ...] = ()
    wall_time: float = 0.0
    credits: float = 0.0

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "phase": self.phase.name,
            "kind": self.kind.value,
            "payload": self.payload,
            "edges": [list(e) for e in self.lineage_edges],
            "wall_time": self.wall_time,
            "credits": self.credits,
        }

    def to_line(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping) -> "SessionEvent":
        payload = dict(d["payload"])
        if "envelope" in payload:
            from .kernel import MessageEnvelope

            payload["envelope"] = MessageEnvelope.from_dict(payload["envelope"])
        if isinstance(payload.get("artifact"), Mapping):
            payload["artifact"] = payload_from_dict(payload["artifact"])
        if isinstance(payload.get("verdict"), Mapping):
            payload["verdict"] = Verdict.from_dict(payload["verdict"])
        return cls(
            index=d["index"],
            phase=Phase[d["phase"]],
            kind=EventKind(d["kind"]),
            payload=payload,
            lineage_edges=tuple((a, b) for a, b in d["edges"]),
            wall_time=d["wall_time"],
            credits=d["credits"],
        )


class SessionLog:
    """Append-only event list with a registry of lineage refs."""

    def __init__(self, seed: int = 0, branch: str = "main", session_id: str = "session", track_refs: bool = True):
        self.seed = seed
        self.branch = branch
        self.session_id = session_id
        self._events: list[SessionEvent] = []
        self._refs: set[str] = set()
        self._track = track_refs

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self):
        return iter(self._events)

    def __getitem__(self, i):
        return self._events[i]

    @property
    def events(self) -> tuple[SessionEvent, ...]:
        return tuple(self._events)

    def append(self, kind: EventKind, phase: Phase, payload: Mapping[str, Any] | None = None,
               edges: Iterable[tuple[str, str]] = (), wall_time: float = 0.0, credits: float = 0.0) -> SessionEvent:
        if edges:
            edges = tuple(edges)
        if edges and self._track:
            targets = {dst for _, dst in edges}
            for src, dst in edges:
                # a column with no upstream (a constant) is introduced by its own handle
                if (src not in self._refs and src not in targets and not is_root(src)
                        and not src.startswith(dst + ".")):
                    raise UnknownRef(src)
            for src, dst in edges:
                self._refs.add(src)
                self._refs.add(dst)
        ev = SessionEvent(len(self._events), phase, kind, payload or {}, edges or (), wall_time, credits)
        self._events.append(ev)
        return ev

    def header(self) -> dict:
        return {"format": LOG_FORMAT, "version": LOG_VERSION, "seed": self.seed,
                "branch": self.branch, "session": self.session_id}

    def lines(self) -> list[str]:
        return [ev.to_line() for ev in self._events]

    def truncated(self, position: int, branch: str | None = None) -> "SessionLog":
        out = SessionLog(self.seed, branch or self.branch, self.session_id, self._track)
        for ev in self._events[:position]:
            if ev.lineage_edges and out._track:
                for a, b in ev.lineage_edges:
                    out._refs.add(a)
                    out._refs.add(b)
            out._events.append(ev)
        return out

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            fh.write(canonical_json(self.header()) + "\n")
            for line in self.lines():
                fh.write(line + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "SessionLog":
        with Path(path).open(encoding="utf-8") as fh:
            try:
                header = json.loads(fh.readline())
            except ValueError:
                raise CorruptCheckpoint(f"{path} has no readable header") from None
            if header.get("format") != LOG_FORMAT:
                raise CorruptCheckpoint(f"{path} is not a session log")
            if header.get("version") != LOG_VERSION:
                raise CorruptCheckpoint(f"unsupported log version {header.get('version')}")
            log = cls(header["seed"], header["branch"], header.get("session", "session"))
            for n, line in enumerate(fh, 2):
                if not line.strip():
                    continue
                try:
                    ev = SessionEvent.from_dict(json.loads(line))
                except (ValueError, KeyError, TypeError) as exc:
                    raise CorruptCheckpoint(f"{path}:{n}: unreadable event ({exc})") from None
                if ev.index != len(log._events):
                    raise CorruptCheckpoint(f"{path}:{n}: event index {ev.index} out of sequence")
                for a, b in ev.lineage_edges:
                    log._refs.add(a)
                    log._refs.add(b)
                log._events.append(ev)
        return log


# ---------------------------------------------------------------------------
# checkpoints


@dataclass(frozen=True)
class Checkpoint:
    """Complete serialized session state at a decision point."""

    index: int
    log_position: int
    state: Mapping[str, Any]

    @property
    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.state).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {"format": CHECKPOINT_FORMAT, "version": LOG_VERSION, "index": self.index,
                "log_position": self.log_position, "hash": self.digest, "state": self.state}

    def dumps(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "Checkpoint":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CorruptCheckpoint(f"unreadable checkpoint: {exc}") from None
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != LOG_VERSION:
            raise CorruptCheckpoint("not a checkpoint of a supported version")
        cp = cls(d["index"], d["log_position"], d["state"])
        if cp.digest != d.get("hash"):
            raise CorruptCheckpoint(f"checkpoint {cp.index} hash mismatch")
        return cp

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "Checkpoint":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# lineage audits


@dataclass(frozen=True)
class LineageGraph:
    forward: Mapping[str, tuple[str, ...]]
    backward: Mapping[str, tuple[str, ...]]
    # first event index introducing each edge, for event-level subgraphs
    edge_event: Mapping[tuple[str, str], int]

    @property
    def nodes(self) -> set[str]:
        return set(self.forward) | set(self.backward)

    @classmethod
    def from_log(cls, log: Iterable[SessionEvent]) -> "LineageGraph":
        fwd: dict[str, list[str]] = {}
        bwd: dict[str, list[str]] = {}
        where: dict[tuple[str, str], int] = {}
        for ev in log:
            for edge in ev.lineage_edges:
                if edge in where:
                    continue
                where[edge] = ev.index
                src, dst = edge
                fwd.setdefault(src, []).append(dst)
                bwd.setdefault(dst, []).append(src)
                fwd.setdefault(dst, [])
                bwd.setdefault(src, [])
        return cls({k: tuple(v) for k, v in fwd.items()}, {k: tuple(v) for k, v in bwd.items()}, where)


def _closure(start: str, adjacency: Mapping[str, tuple[str, ...]]) -> set[str]:
    seen = {start}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        for nxt in adjacency.get(node, ()):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


@dataclass(frozen=True)
class TraceResult:
    ref: str
    nodes: frozenset[str]
    edges: tuple[tuple[str, str], ...]
    events: tuple[int, ...]

    @property
    def roots(self) -> set[str]:
        targets = {dst for _, dst in self.edges}
        return {n for n in self.nodes if n not in targets}


def _graph(log) -> LineageGraph:
    return log if isinstance(log, LineageGraph) else LineageGraph.from_log(log)


def trace_backward(log, ref: str) -> TraceResult:
    """Everything ``ref`` was derived from, including ``ref`` itself."""
    g = _graph(log)
    if ref not in g.backward and ref not in g.forward:
        raise UnknownRef(ref)
    nodes = _closure(ref, g.backward)
    edges = tuple(sorted((s, d) for d in nodes for s in g.backward.get(d, ())))
    events = tuple(sorted({g.edge_event[e] for e in edges}))
    return TraceResult(ref, frozenset(nodes), edges, events)


def exposure_analysis(log, ref: str) -> set[str]:
    """Every downstream ref affected if ``ref`` were corrected."""
    g = _graph(log)
    if ref not in g.forward and ref not in g.backward:
        raise UnknownRef(ref)
    out = _closure(ref, g.forward)
    out.discard(ref)
    return out
