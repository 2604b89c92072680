"""Session driver: runs one query through plan, approval, inner loops, outer gate and synthesis.

A session is a resumable stage machine. Checkpoints are taken at decision
points (before approval, before each scheduling decision, before each
inner-loop round and before the output gate); restoring one and running on
reproduces the original log suffix exactly under the same seed.
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .agents import AgentInstance, ProfileError, RoleProfile, StochasticProfile, produce, spawn
from .cascade import (
    ESCALATION_THRESHOLD,
    CascadeError,
    InnerLoop,
    LoopStatus,
    evaluate,
    final_step,
    l1_critics,
    outer_gate,
    reason,
    steps_to_rerun,
)
from .executor import Executor, ExecutorError, PrimitiveFailure, SummaryKind
from .kernel import DEFAULT_VISIBILITY, SESSION_SCOPE, Kernel, relay_summary
from .model import (
    AgentRole,
    ArtifactPayload,
    ControlPayload,
    Decision,
    Layer,
    Phase,
    PlanPayload,
    RoleKind,
    SummaryPayload,
    Verdict,
    VerdictPayload,
    payload_from_dict,
    payload_to_dict,
)
from .plan import (
    ApprovalOutcome,
    ApprovalPolicy,
    AutoAccept,
    ExecutionPlan,
    PlannerProfile,
    PlanError,
    Query,
    UnplannableQuery,
    approve_plan,
    build_plan,
    policy_from_state,
    refine_plan,
    schedule,
)
from .session import Checkpoint, CorruptCheckpoint, EventKind, SessionLog


class InvalidConfig(ValueError):
    pass


class Mode(str, enum.Enum):
    ToolChain = "ToolChain"  # one agent chains tools, nobody checks
    SubAgent = "SubAgent"    # parallel workers, aggregated without conflict detection
    Council = "Council"      # the full critic cascade


class UserVerdict(str, enum.Enum):
    Approved = "Approved"
    Rejected = "Rejected"
    ReplanRequested = "ReplanRequested"


class Status(str, enum.Enum):
    Running = "Running"
    Completed = "Completed"
    Declined = "Declined"
    Escalated = "Escalated"


WRITER_VENDOR, CRITIC_VENDOR, FALLBACK_VENDOR = "vendor-a", "vendor-b", "vendor-c"
CRITIC_IDS = {RoleKind.CodeCritic: "code-critic", RoleKind.ChartCritic: "chart-critic",
              RoleKind.OutputCritic: "output-critic"}
FIXED_ROLES = (
    ("user", RoleKind.UserProxy), ("planner", RoleKind.Planner), ("refiner", RoleKind.PlanRefiner),
    ("guardrails", RoleKind.Guardrails), ("coordinator", RoleKind.Coordinator),
    ("plan-executor", RoleKind.PlanExecutor), ("code-executor", RoleKind.CodeExecutor),
)
SUMMARIZER = AgentRole(RoleKind.Summarizer, "team")
CHECKPOINT_STAGES = frozenset({"decide", "schedule", "iterate", "outer"})
VIS = DEFAULT_VISIBILITY


def _role(kind: RoleKind) -> AgentRole:
    return _ROLES[kind]


_ROLES = {k: AgentRole(k) for k in RoleKind}


# ---------------------------------------------------------------------------
# configuration


def _profile(d, where: str) -> StochasticProfile:
    try:
        return StochasticProfile.from_dict(d or {})
    except (ProfileError, KeyError, ValueError, TypeError) as exc:
        raise InvalidConfig(f"{where}: {exc}") from None


@dataclass(frozen=True)
class SessionConfig:
    """Everything that shapes a session besides its seed and query."""

    writers: Mapping[str, RoleProfile] = field(default_factory=lambda: {"default": RoleProfile(StochasticProfile())})
    critics: Mapping[RoleKind, StochasticProfile] = field(default_factory=dict)
    mode: Mode = Mode.Council
    outer_retry_cap: int = 2
    escalation_threshold: int = ESCALATION_THRESHOLD
    max_retries: int | None = None
    deny_kinds: tuple[str, ...] = ()
    max_edit_rounds: int = 3
    executor: Mapping[str, Any] = field(default_factory=dict)
    sample_budget: int = 20
    self_verify: Mapping[str, float] | None = None
    checkpoints: bool = True
    source: Mapping[str, Any] = field(default_factory=dict)

    def critic_profile(self, kind: RoleKind) -> StochasticProfile:
        return self.critics.get(kind) or StochasticProfile()

    def writer_profile(self, step) -> RoleProfile:
        for key in (step.params.get("profile"), step.kind.value, "default"):
            if key and key in self.writers:
                return self.writers[key]
        return RoleProfile(StochasticProfile())

    def to_dict(self) -> dict:
        return dict(self.source)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> "SessionConfig":
        d = dict(d or {})
        known = {"mode", "outer_retry_cap", "escalation_threshold", "max_retries", "deny_kinds", "max_edit_rounds",
                 "writers", "critics", "executor", "sample_budget", "self_verify", "checkpoints", "cascade",
                 "sessions", "seed", "replan_rate", "task", "name", "comparative"}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys {sorted(unknown)}")
        try:
            mode = Mode(d.get("mode", "Council"))
        except ValueError:
            raise InvalidConfig(f"unknown mode {d.get('mode')!r}") from None
        writers = {}
        for key, prof in (d.get("writers") or {"default": {}}).items():
            try:
                writers[key] = RoleProfile.from_dict(prof or {})
            except (ProfileError, KeyError, ValueError, TypeError) as exc:
                raise InvalidConfig(f"writers.{key}: {exc}") from None
        critics = {}
        for key, prof in (d.get("critics") or {}).items():
            try:
                kind = RoleKind(key)
            except ValueError:
                raise InvalidConfig(f"unknown critic role {key!r}") from None
            if kind not in CRITIC_IDS:
                raise InvalidConfig(f"{key} is not a critic role")
            critics[kind] = _profile(prof, f"critics.{key}")
        ints = {}
        for key, default, lo in (("outer_retry_cap", 2, 0), ("escalation_threshold", ESCALATION_THRESHOLD, 1),
                                 ("max_edit_rounds", 3, 0), ("sample_budget", 20, 1)):
            v = d.get(key, default)
            if not isinstance(v, int) or isinstance(v, bool) or v < lo:
                raise InvalidConfig(f"{key} must be an integer >= {lo}")
            ints[key] = v
        mr = d.get("max_retries")
        if mr is not None and (not isinstance(mr, int) or mr < 1):
            raise InvalidConfig("max_retries must be a positive integer")
        sv = d.get("self_verify")
        if sv is not None:
            if set(sv) - {"flip_correct", "flip_wrong"}:
                raise InvalidConfig("self_verify takes flip_correct and flip_wrong")
            for k, v in sv.items():
                if not 0 <= float(v) <= 1:
                    raise InvalidConfig(f"self_verify.{k} must be a probability")
        return cls(writers=writers, critics=critics, mode=mode, max_retries=mr,
                   deny_kinds=tuple(d.get("deny_kinds", ())), executor=dict(d.get("executor") or {}),
                   self_verify=None if sv is None else {k: float(v) for k, v in sv.items()},
                   checkpoints=bool(d.get("checkpoints", True)), source=d, **ints)


# ---------------------------------------------------------------------------
# input loading by reference


def load_input_record(executor: Executor, record: Mapping) -> None:
    """Reload one manifest input, refusing files whose content changed."""
    src = record["source"]
    path = Path(src["path"])
    if not path.exists():
        raise CorruptCheckpoint(f"input file {path} is gone")
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    if digest != src["sha256"]:
        raise CorruptCheckpoint(f"input file {path} changed since the checkpoint")
    executor.load_csv(record["id"][len("input:"):], path, src["schema"])


# ---------------------------------------------------------------------------
# the session


class Session:
    def __init__(self, query: Query, config: SessionConfig | None = None, seed: int = 0,
                 policy: ApprovalPolicy | None = None, inputs: Mapping[str, Mapping[str, str]] | None = None,
                 branch: str = "main", session_id: str = "session", track_lineage: bool = True,
                 planner: PlannerProfile | None = None):
        self.query = query
        self.config = config or SessionConfig()
        self.seed = seed
        self.policy = policy or AutoAccept()
        self.inputs = dict(inputs or {})
        self.planner = planner or PlannerProfile(max_retries=self.config.max_retries)
        self.log = SessionLog(seed, branch, session_id, track_refs=track_lineage)
        self.kernel = Kernel(self.log)
        self.executor = Executor(self.config.executor, self.config.sample_budget)
        self.agents: dict[str, AgentInstance] = {}
        self.plan: ExecutionPlan | None = None
        self.stage = "start"
        self.status = Status.Running
        self.user_verdict: UserVerdict | None = None
        self.completed: list[int] = []
        self.approved: dict[int, ArtifactPayload] = {}
        self.attempts: dict[int, int] = {}
        self.rounds: dict[int, int] = {}
        self.rerun_feedback: dict[int, list] = {}
        self.loop: InnerLoop | None = None
        self.team_msgs: list = []
        self.summary_ids: list[int] = []
        self.outer_round = 0
        self.edit_rounds = 0
        self.clock = 0.0
        self.credits = 0.0
        self.checkpoints: list[Checkpoint] = []
        self._skip_checkpoint = False

    # -- public driving

    def run(self) -> "Session":
        while self.stage != "done":
            if self.config.checkpoints and self.stage in CHECKPOINT_STAGES and not self._skip_checkpoint:
                self.take_checkpoint()
            self._skip_checkpoint = False
            getattr(self, "_stage_" + self.stage)()
        return self

    @property
    def result(self) -> dict:
        if self.plan is None or self.status is not Status.Completed:
            return {}
        return dict(self.approved[final_step(self.plan)].values)

    # -- helpers

    def _send(self, sender: RoleKind | AgentRole, channel: str, payload, parents=(), scope: str = SESSION_SCOPE):
        role = sender if isinstance(sender, AgentRole) else _role(sender)
        env = self.kernel.envelope(role, VIS[channel], payload, parents, scope)
        self.kernel.dispatch(env)
        return env

    def _cost(self, agent: AgentInstance, step: int | None, attempt: int, recovery: bool) -> None:
        p = agent.profile
        self.clock += p.time_per_call
        self.credits += p.cost_per_call
        self.log.append(EventKind.CostIncurred, self.kernel.phase,
                        {"agent": agent.id, "role": agent.role.kind._value_, "tier": p.tier._value_, "step": step,
                         "attempt": attempt, "recovery": recovery},
                        wall_time=p.time_per_call, credits=p.cost_per_call)

    def _escalate(self, code: str, detail: Mapping, verdict: UserVerdict = UserVerdict.ReplanRequested) -> None:
        self.kernel.advance(Phase.Escalation)
        payload = {"reason": code, **detail, "user_verdict": verdict.value}
        self._send(RoleKind.Coordinator, "escalation", ControlPayload("escalate", payload))
        note = self.policy.escalated(payload)
        if note:
            payload["user_note"] = note
        self.log.append(EventKind.EscalationRaised, Phase.Escalation, payload)
        self.user_verdict = verdict
        self.status = Status.Escalated
        self.stage = "done"

    # -- stages

    def _stage_start(self) -> None:
        k = self.kernel
        for agent_id, kind in FIXED_ROLES:
            k.register(agent_id, _role(kind))
        k.register("summarizer", SUMMARIZER)
        if self.config.mode is Mode.Council:
            for kind, cid in CRITIC_IDS.items():
                agent = spawn(cid, _role(kind), self.config.critic_profile(kind), self.seed, CRITIC_VENDOR)
                self.agents[cid] = agent
                k.register(cid, agent.role)
        for name, spec in sorted(self.inputs.items()):
            self.executor.load_csv(name, spec["csv"], spec["schema"])
        self._send(RoleKind.UserProxy, "query", ControlPayload("query", self.query.to_dict()))
        self.stage = "plan"

    def _stage_plan(self) -> None:
        try:
            plan = build_plan(self.query, self.planner)
        except UnplannableQuery as exc:
            self._escalate("UNPLANNABLE", {"detail": str(exc), "planned": False})
            return
        self._announce(plan)

    def _announce(self, plan: ExecutionPlan) -> None:
        self.plan = plan.declare(len(self.log))
        self._send(RoleKind.Planner, "plan", PlanPayload(self.plan.to_dict()))
        self.stage = "approve"

    def _stage_approve(self) -> None:
        self.kernel.advance(Phase.Approval)
        self.stage = "decide"

    def _stage_decide(self) -> None:
        plan, decision = approve_plan(self.plan, self.policy, len(self.log), self.config.deny_kinds)
        if decision.outcome is ApprovalOutcome.Accept:
            self.plan = plan
            self._send(decision.by, "approval", ControlPayload("approve", decision.to_dict()))
            self._spawn_writers()
            self.kernel.advance(Phase.Execution)
            self.stage = "schedule"
            return
        self.plan = plan
        if decision.outcome is ApprovalOutcome.Guardrail:
            # policy violations skip refinement and go straight to the user gate
            self._escalate("GUARDRAIL_DENY", {"detail": decision.reason})
            return
        self.kernel.advance(Phase.Planning)
        action = "edit" if decision.outcome is ApprovalOutcome.Edit else "refuse"
        self._send(decision.by, "plan_feedback", ControlPayload(action, decision.to_dict()))
        if action == "edit" and self.edit_rounds < self.config.max_edit_rounds:
            self.edit_rounds += 1
            try:
                refined = refine_plan(replace(plan, approved=False, approval_event=None), decision)
            except PlanError as exc:
                self._escalate("UNPLANNABLE", {"detail": str(exc), "planned": False})
                return
            self._announce(refined)
            return
        self.status = Status.Declined
        self.stage = "done"

    def _spawn_writers(self) -> None:
        for step in self.plan.steps:
            wid = f"writer-s{step.id}"
            role = AgentRole(RoleKind.Writer, step.writer_spec)
            self.agents[wid] = spawn(wid, role, self.config.writer_profile(step), self.seed,
                                     WRITER_VENDOR, FALLBACK_VENDOR)
            self.kernel.register(wid, role, team=f"team-s{step.id}")

    def _stage_schedule(self) -> None:
        ready = schedule(self.plan, self.completed)
        if not ready:
            if self.config.mode is Mode.Council:
                self.stage = "outer"
            else:
                self.stage = "verify" if self.config.self_verify else "synth"
            return
        sid = ready[0]
        fb = self.rerun_feedback.pop(sid, None)
        prior = self.approved.get(sid)
        self.loop = InnerLoop(sid, attempt=self.attempts.get(sid, 0),
                              feedback=tuple(fb or ()), prior=prior if fb is not None or prior else None,
                              threshold=self.config.escalation_threshold)
        self.team_msgs = []
        self.stage = "iterate"

    def _stage_iterate(self) -> None:
        loop = self.loop
        step = self.plan.step(loop.step_id)
        status = loop.iterate(self, step)
        if self.kernel.phase is not Phase.Execution:
            self.kernel.advance(Phase.Execution)
        if status is LoopStatus.Running:
            return
        sid = step.id
        self.attempts[sid] = loop.attempt
        self.rounds[sid] = self.rounds.get(sid, 0) + loop.rounds
        if status is LoopStatus.Approved:
            self.approved[sid] = loop.final
            self.completed.append(sid)
            env = relay_summary(self.team_msgs, SUMMARIZER, self.kernel.next_id)
            self.kernel.next_id += 1
            self.kernel.dispatch(env)
            self.summary_ids.append(env.id)
            self.loop = None
            self.stage = "schedule"
            return
        code = "GUARDRAIL_DENY" if status is LoopStatus.Escalated else "RETRIES_EXHAUSTED"
        self._escalate(code, {"step": sid, "rounds": loop.rounds,
                              "reasons": [[r.code, r.ref] for r in loop.last_reasons]})

    def _stage_outer(self) -> None:
        k = self.kernel
        k.advance(Phase.OuterCritique)
        outputs = {sid: self.approved[sid] for sid in sorted(self.approved)}
        env = self._send(RoleKind.Coordinator, "outputs",
                         SummaryPayload(SESSION_SCOPE, tuple(self.summary_ids),
                                        {"artifacts": [a.ref for a in outputs.values()]}),
                         parents=self.summary_ids)
        critic = self.agents[CRITIC_IDS[RoleKind.OutputCritic]]
        verdict = outer_gate(outputs, critic, self.plan)
        self._cost(critic, None, self.outer_round, self.outer_round > 0)
        final = outputs[final_step(self.plan)]
        edges = [(f"criterion:{c}", final.ref) for c in verdict.evaluated_criteria] \
            if verdict.decision is Decision.Approve else []
        self.log.append(EventKind.VerdictIssued, Phase.OuterCritique,
                        {"verdict": verdict, "artifact": final.ref, "round": self.outer_round}, edges)
        self._send(RoleKind.OutputCritic, "l2_verdict", VerdictPayload(verdict), parents=[env.id])
        self.outer_round += 1
        if verdict.decision is Decision.Approve:
            self.stage = "synth"
            return
        if verdict.decision is Decision.Escalate or self.outer_round > self.config.outer_retry_cap:
            code = "GUARDRAIL_DENY" if verdict.decision is Decision.Escalate else "OUTER_RETRIES_EXHAUSTED"
            self._escalate(code, {"rounds": self.outer_round,
                                  "reasons": [[r.code, r.ref] for r in verdict.reasons]})
            return
        rerun = steps_to_rerun(verdict, self.plan)
        cited: dict[int, list] = {}
        for r in verdict.reasons:
            if r.ref.startswith("artifact:s"):
                cited.setdefault(int(r.ref[len("artifact:s"):].split("/")[0]), []).append(r)
        k.advance(Phase.Execution)
        self._send(RoleKind.Coordinator, "reexecute",
                   ControlPayload("feedback", {"steps": rerun, "reasons": [[r.code, r.ref] for r in verdict.reasons]}))
        for sid in rerun:
            self.completed.remove(sid)
            self.rerun_feedback[sid] = cited.get(sid, [])
        self.stage = "schedule"

    def _stage_verify(self) -> None:
        """Self-verification: the final step's own writer re-reads its answer."""
        sid = final_step(self.plan)
        writer = self.agents[f"writer-s{sid}"]
        art = self.approved[sid]
        u = writer.rng.random()
        wrong = bool(art.defects) or any(a.defects for a in self.approved.values())
        flip = u < (self.config.self_verify.get("flip_wrong", 0.0) if wrong
                    else self.config.self_verify.get("flip_correct", 0.0))
        self._cost(writer, sid, art.attempt + 1, True)
        if flip:
            prior = replace(art, defects=() if art.defects else (
                _flip_defect(writer, art),))
            new = self.produce(writer, self.plan.step(sid), None, prior, art.attempt + 1)
            new = self.execute(new)
            self.approved[sid] = new
        self.log.append(EventKind.VerdictIssued, Phase.Execution,
                        {"self_verify": True, "flipped": flip, "before": art.ref, "artifact": self.approved[sid].ref})
        self.stage = "synth"

    def _stage_synth(self) -> None:
        self.kernel.advance(Phase.Synthesis)
        sid = final_step(self.plan)
        final = self.approved[sid]
        env = self._send(RoleKind.Coordinator, "present",
                         ControlPayload("present", {"artifact": final.ref, "values": dict(final.values)}))
        if self.log._track:
            for name in sorted(final.values):
                edges = [(final.ref, f"result:{name}")]
                if final.handle is not None:
                    edges.append((f"{final.handle}.{name}", f"result:{name}"))
                self.log.append(EventKind.CitationRecorded, Phase.Synthesis,
                                {"result": f"result:{name}", "value": final.values[name]}, edges)
        defective = any(a.defects for a in self.approved.values())
        self.user_verdict = UserVerdict.Rejected if defective else UserVerdict.Approved
        self._send(RoleKind.UserProxy, "user_verdict",
                   ControlPayload("user_verdict", {"verdict": self.user_verdict.value}), parents=[env.id])
        self.status = Status.Completed
        self.stage = "done"

    # -- the team interface used by InnerLoop

    def writer_for(self, step) -> AgentInstance:
        return self.agents[f"writer-s{step.id}"]

    def replace_writer(self, step, agent: AgentInstance) -> None:
        self.agents[f"writer-s{step.id}"] = agent

    def produce(self, writer, step, feedback, prior, attempt) -> ArtifactPayload:
        art = produce(writer, step, feedback, prior, attempt)
        self._cost(writer, step.id, attempt, attempt > 0)
        env = self._send(writer.role, "artifact", art, parents=[m.id for m in self.team_msgs[-1:]],
                         scope=f"team-s{step.id}")
        self.team_msgs.append(env)
        return art

    def execute(self, art: ArtifactPayload) -> ArtifactPayload:
        step = self.plan.step(art.step_id)
        edges: list[tuple[str, str]] = []
        if not art.program:
            n = int(step.params.get("rows", 1))
            art = replace(art, executed=True, row_count=n, non_null={f: n for f in art.fields})
        else:
            art, edges = self._run_program(step, art)
        self.log.append(EventKind.ArtifactProduced, Phase.Execution, {"artifact": art}, edges if self.log._track else ())
        if self.team_msgs:
            env = self._send(RoleKind.CodeExecutor, "executed", art, parents=[self.team_msgs[-1].id],
                             scope=f"team-s{step.id}")
            self.team_msgs.append(env)
        return art

    def _run_program(self, step, art: ArtifactPayload):
        handles, dep_refs = [], []
        for src in step.params.get("inputs", ()):
            if isinstance(src, int):
                dep = self.approved[src]
                handles.append(dep.handle)
                dep_refs.append(dep.ref)
            else:
                handles.append(src)
        ex = self.executor
        try:
            h = ex.submit(list(art.program), handles)
        except PrimitiveFailure as exc:
            return replace(art, executed=True, failure=f"primitive {exc.step_index}: {exc.reason}"), []
        except ExecutorError as exc:
            return replace(art, executed=True, failure=str(exc)), []
        stats = ex.summarize(h.id, SummaryKind.Stats).content
        values = {}
        if h.row_count == 1:
            values = dict(ex.summarize(h.id, SummaryKind.SampleRows, n=1).content["rows"][0])
        art = replace(art, executed=True, fields=h.columns, row_count=h.row_count, handle=h.id,
                      non_null={c: s["count"] for c, s in stats["columns"].items()}, values=values)
        edges = list(ex.last_edges) + [(r, h.id) for r in dep_refs] + [(h.id, art.ref)]
        return art, edges

    def critics_for(self, art: ArtifactPayload) -> list[AgentInstance]:
        if self.config.mode is not Mode.Council:
            return []
        return l1_critics([self.agents[CRITIC_IDS[RoleKind.CodeCritic]],
                           self.agents[CRITIC_IDS[RoleKind.ChartCritic]]], art)

    def criteria_for(self, step):
        return self.plan.criteria_for(step.criteria)

    def critique(self, critics, art: ArtifactPayload, criteria) -> list[Verdict]:
        self.kernel.advance(Phase.InnerCritique)
        verdicts = []
        parent = [self.team_msgs[-1].id] if self.team_msgs else []
        for critic in critics:
            v = evaluate(critic, art, criteria)
            self._cost(critic, art.step_id, art.attempt, art.attempt > 0)
            edges = [(f"criterion:{c}", art.ref) for c in v.evaluated_criteria] \
                if v.decision is Decision.Approve and self.log._track else []
            self.log.append(EventKind.VerdictIssued, Phase.InnerCritique,
                            {"verdict": v, "artifact": art.ref, "producer": art.producer}, edges)
            env = self._send(critic.role, "l1_verdict", VerdictPayload(v), parents=parent,
                             scope=f"team-s{art.step_id}")
            self.team_msgs.append(env)
            verdicts.append(v)
        return verdicts

    # -- checkpoints

    def state(self) -> dict:
        return {
            "seed": self.seed,
            "stage": self.stage,
            "status": self.status.value,
            "user_verdict": None if self.user_verdict is None else self.user_verdict.value,
            "query": self.query.to_dict(),
            "config": self.config.to_dict(),
            "policy": self.policy.state(),
            "inputs": {k: dict(v) for k, v in sorted(self.inputs.items())},
            "kernel": self.kernel.state(),
            "agents": {k: a.state() for k, a in sorted(self.agents.items())},
            "plan": None if self.plan is None else self.plan.to_dict(),
            "completed": list(self.completed),
            "approved": {str(k): payload_to_dict(v) for k, v in sorted(self.approved.items())},
            "attempts": {str(k): v for k, v in sorted(self.attempts.items())},
            "rounds": {str(k): v for k, v in sorted(self.rounds.items())},
            "rerun_feedback": {str(k): [[r.code, r.ref] for r in v] for k, v in sorted(self.rerun_feedback.items())},
            "loop": None if self.loop is None else self.loop.state(),
            "team_msgs": [m.to_dict() for m in self.team_msgs],
            "summary_ids": list(self.summary_ids),
            "outer_round": self.outer_round,
            "edit_rounds": self.edit_rounds,
            "clock": self.clock,
            "credits": self.credits,
            "executor": self.executor.manifest(),
            "checkpoint_count": len(self.checkpoints),
        }

    def take_checkpoint(self) -> Checkpoint:
        cp = Checkpoint(len(self.checkpoints), len(self.log), self.state())
        self.log.append(EventKind.CheckpointTaken, self.kernel.phase,
                        {"checkpoint": cp.index, "stage": self.stage, "hash": cp.digest})
        self.checkpoints.append(Checkpoint(cp.index, len(self.log), cp.state))
        return self.checkpoints[-1]

    @classmethod
    def restore(cls, cp: Checkpoint, log: SessionLog, policy: ApprovalPolicy | None = None,
                branch: str | None = None) -> "Session":
        """Rebuild the session captured by ``cp``; running it continues the log from there."""
        from .kernel import MessageEnvelope
        from .model import Reason

        s = cp.state
        if cp.log_position > len(log):
            raise CorruptCheckpoint("checkpoint points past the end of the log")
        marker = log[cp.log_position - 1]
        if marker.kind is not EventKind.CheckpointTaken or marker.payload.get("hash") != cp.digest:
            raise CorruptCheckpoint(f"checkpoint {cp.index} does not match the log")
        cfg = SessionConfig.from_dict(s["config"])
        sess = cls(Query.from_dict(s["query"]), cfg, s["seed"],
                   policy if policy is not None else policy_from_state(s["policy"]),
                   s["inputs"], branch or log.branch, log.session_id, log._track)
        sess.log = log.truncated(cp.log_position, branch or log.branch)
        sess.kernel = Kernel.from_state(s["kernel"], sess.log)
        sess.agents = {k: AgentInstance.from_state(v) for k, v in s["agents"].items()}
        sess.plan = None if s["plan"] is None else ExecutionPlan.from_dict(s["plan"])
        sess.stage = s["stage"]
        sess.status = Status(s["status"])
        sess.user_verdict = None if s["user_verdict"] is None else UserVerdict(s["user_verdict"])
        sess.completed = list(s["completed"])
        sess.approved = {int(k): payload_from_dict(v) for k, v in s["approved"].items()}
        sess.attempts = {int(k): v for k, v in s["attempts"].items()}
        sess.rounds = {int(k): v for k, v in s["rounds"].items()}
        sess.rerun_feedback = {int(k): [Reason(c, r) for c, r in v] for k, v in s["rerun_feedback"].items()}
        sess.loop = None if s["loop"] is None else InnerLoop.from_state(s["loop"])
        sess.team_msgs = [MessageEnvelope.from_dict(m) for m in s["team_msgs"]]
        sess.summary_ids = list(s["summary_ids"])
        sess.outer_round = s["outer_round"]
        sess.edit_rounds = s["edit_rounds"]
        sess.clock = s["clock"]
        sess.credits = s["credits"]
        sess.executor = Executor.from_manifest(s["executor"], load_input_record, cfg.executor, cfg.sample_budget)
        sess.checkpoints = [None] * s["checkpoint_count"] + [cp]
        sess._skip_checkpoint = True
        return sess


def _flip_defect(writer: AgentInstance, art: ArtifactPayload):
    from .model import Defect, DefectKind

    return Defect(f"{writer.id}#verify{art.attempt}", DefectKind.IntentDefect, 0.0)


def run_session(query: Query, config: SessionConfig | None = None, seed: int = 0, **kw) -> Session:
    return Session(query, config, seed, **kw).run()
