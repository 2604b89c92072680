"""Stage-gated multi-agent orchestration with stochastic stand-in agents."""
from __future__ import annotations

from .cascade import CascadeModel, expected_escape_rate
from .executor import DataHandle, Executor, SummaryKind, fuzzy_match
from .kernel import Kernel, MessageEnvelope, relay_summary
from .model import AgentRole, ArtifactPayload, Decision, Layer, Phase, RoleKind, StepKind, Verdict
from .orchestrator import InvalidConfig, Mode, Session, SessionConfig, UserVerdict, run_session
from .plan import AcceptanceCriterion, ExecutionPlan, PlanStep, Query, approve_plan, schedule
from .scenario import run_scenario
from .session import Checkpoint, SessionLog, exposure_analysis, trace_backward
from .sim import compare_architectures, ledger_report, run_cohort, run_cohorts

__all__ = [
    "AcceptanceCriterion", "AgentRole", "ArtifactPayload", "CascadeModel", "Checkpoint", "DataHandle",
    "Decision", "ExecutionPlan", "Executor", "InvalidConfig", "Kernel", "Layer", "MessageEnvelope", "Mode",
    "Phase", "PlanStep", "Query", "RoleKind", "Session", "SessionConfig", "SessionLog", "StepKind",
    "SummaryKind", "UserVerdict", "Verdict", "approve_plan", "compare_architectures", "expected_escape_rate",
    "exposure_analysis", "fuzzy_match", "ledger_report", "relay_summary", "run_cohort", "run_cohorts",
    "run_scenario", "run_session", "schedule", "trace_backward",
]
