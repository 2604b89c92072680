from __future__ import annotations

import pytest

from rivals.agents import (
    AgentInstance,
    AlreadySenior,
    ProfileError,
    RoleProfile,
    StochasticProfile,
    Tier,
    escalate_tier,
    produce,
    spawn,
    switch_vendor,
)
from rivals.model import AgentRole, DefectKind, RoleKind, StepKind
from rivals.plan import PlanStep

WRITER = AgentRole(RoleKind.Writer, "python")
STEP = PlanStep(1, StepKind.Transform, params={"fields": ["a"]})
CHART = PlanStep(2, StepKind.Chart, params={"fields": ["x"]})


def _writer(seed=0, **kw):
    return spawn("writer-s1", WRITER, StochasticProfile(**kw), seed, "vendor-a", "vendor-c")


def test_same_seed_same_draws():
    a, b = _writer(3, error_rate=0.5), _writer(3, error_rate=0.5)
    assert [produce(a, STEP).defects for _ in range(50)] == [produce(b, STEP).defects for _ in range(50)]


def test_streams_are_per_agent():
    a = spawn("w-a", WRITER, StochasticProfile(error_rate=0.5), 0, "v")
    b = spawn("w-b", WRITER, StochasticProfile(error_rate=0.5), 0, "v")
    assert [bool(produce(a, STEP).defects) for _ in range(40)] != [bool(produce(b, STEP).defects) for _ in range(40)]


def test_error_rate_is_respected():
    w = _writer(1, error_rate=0.3)
    n = 4000
    hits = sum(bool(produce(w, STEP).defects) for _ in range(n))
    # 3 sigma of a binomial(4000, 0.3)
    assert abs(hits / n - 0.3) < 3 * (0.3 * 0.7 / n) ** 0.5


def test_chart_defects_only_on_chart_steps():
    mix = {DefectKind.ChartDefect: 1.0}
    w = _writer(2, error_rate=1.0, defect_mix=mix)
    assert {produce(w, STEP).defects[0].kind for _ in range(20)} == {DefectKind.CodeDefect}
    assert {produce(w, CHART).defects[0].kind for _ in range(20)} == {DefectKind.ChartDefect}


def test_repair_schedule_is_deterministic_at_the_extremes():
    w = _writer(0, error_rate=1.0, repair_schedule=(1.0, 1.0, 0.0))
    art = produce(w, STEP)
    for attempt, survives in ((1, True), (2, True), (3, False)):
        art = produce(w, STEP, feedback=["x"], prior=art, attempt=attempt)
        assert bool(art.defects) is survives
    # without feedback the defects carry over unchanged
    again = produce(w, STEP, feedback=None, prior=produce(_writer(0, error_rate=1.0), STEP), attempt=1)
    assert again.defects


def test_persistence_falls_back_to_repair_factor():
    p = StochasticProfile(repair_factor=0.25, repair_schedule=(0.9,))
    assert p.persistence(1) == 0.9 and p.persistence(2) == 0.25


def test_profile_validation():
    with pytest.raises(ProfileError):
        StochasticProfile(error_rate=1.5)
    with pytest.raises(ProfileError):
        StochasticProfile(defect_mix={DefectKind.CodeDefect: 0.0})
    with pytest.raises(ProfileError):
        StochasticProfile.from_dict({"bogus": 1})
    with pytest.raises(ProfileError):
        RoleProfile(StochasticProfile(error_rate=0.1), StochasticProfile(error_rate=0.2, tier=Tier.Senior))
    p = StochasticProfile(error_rate=0.2, repair_schedule=(1.0, 0.5))
    assert StochasticProfile.from_dict(p.to_dict()) == p


def test_only_writers_produce():
    critic = spawn("cc", AgentRole(RoleKind.CodeCritic), StochasticProfile(), 0, "v")
    with pytest.raises(ProfileError):
        produce(critic, STEP)


def test_escalate_tier_then_already_senior():
    w = _writer(0, error_rate=0.2, cost_per_call=1.0)
    w.rejections = 2
    s = escalate_tier(w)
    assert s.tier is Tier.Senior and s.rejections == 0 and s.role == w.role and s.rng_stream == w.rng_stream
    assert s.profile.cost_per_call == 2.0
    with pytest.raises(AlreadySenior):
        escalate_tier(s)


def test_escalate_uses_configured_senior():
    senior = StochasticProfile(error_rate=0.05, tier=Tier.Senior)
    w = spawn("w", WRITER, RoleProfile(StochasticProfile(error_rate=0.2), senior), 0, "v")
    assert escalate_tier(w).profile == senior


def test_switch_vendor_swaps_and_resets():
    w = _writer()
    w.rejections = 3
    v = switch_vendor(w)
    assert (v.vendor_tag, v.fallback_vendor, v.rejections) == ("vendor-c", "vendor-a", 0)
    solo = spawn("w", WRITER, StochasticProfile(), 0, "v")
    assert switch_vendor(solo).vendor_tag == "v"


def test_state_round_trip_continues_the_stream():
    w = _writer(5, error_rate=0.5)
    for _ in range(7):
        produce(w, STEP)
    clone = AgentInstance.from_state(w.state())
    assert clone.state() == w.state()
    assert [produce(clone, STEP).defects for _ in range(10)] == [produce(w, STEP).defects for _ in range(10)]
