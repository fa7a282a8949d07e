"""Heartbeats, cross-track stop, command-echo validation, stop orchestration."""
from __future__ import annotations

import math
from dataclasses import dataclass

import pytest

from racestack.supervisor import (
    Criticality,
    EchoTolerances,
    Supervisor,
    SupervisorAction,
)


@dataclass
class FakeActuals:
    steering_actual_deg: float
    brake_front: float
    brake_rear: float
    throttle_actual: float


@dataclass
class FakeCmd:
    steering: float
    brake: float
    throttle: float


def supervisor_with_modules():
    sup = Supervisor()
    sup.register("estimator", period=0.008, timeout=0.2, criticality=Criticality.EMERGENCY)
    sup.register("planner", period=0.02, timeout=0.2, criticality=Criticality.CONTROLLED_STOP)
    return sup


def test_fresh_heartbeats_give_none():
    sup = supervisor_with_modules()
    sup.beat("estimator", 0.99)
    sup.beat("planner", 0.99)
    v = sup.check_heartbeats(1.0)
    assert v.action == SupervisorAction.NONE


def test_planner_silence_is_controlled_stop():
    sup = supervisor_with_modules()
    sup.beat("estimator", 0.99)
    sup.beat("planner", 0.69)
    v = sup.check_heartbeats(1.0)
    assert v.action == SupervisorAction.CONTROLLED_STOP
    assert "planner" in v.cause


def test_estimator_silence_is_emergency():
    sup = supervisor_with_modules()
    sup.beat("estimator", 0.69)
    sup.beat("planner", 0.99)
    v = sup.check_heartbeats(1.0)
    assert v.action == SupervisorAction.EMERGENCY_STOP
    assert "estimator" in v.cause


def test_heartbeat_timeout_must_cover_two_periods():
    sup = Supervisor()
    with pytest.raises(ValueError):
        sup.register("x", period=0.2, timeout=0.3, criticality=Criticality.EMERGENCY)


def test_cross_track_thresholds():
    sup = Supervisor()
    assert sup.check_cross_track(0.8).action == SupervisorAction.NONE
    assert sup.check_cross_track(3.6).action == SupervisorAction.CONTROLLED_STOP
    assert sup.check_cross_track(-3.6).action == SupervisorAction.CONTROLLED_STOP
    assert sup.check_cross_track(float("nan")).action == SupervisorAction.EMERGENCY_STOP


def test_echo_nominal_lag_is_ok():
    sup = Supervisor()
    now = 0.0
    for i in range(50):
        now = i * 0.02
        sup.observe_command(now, FakeCmd(steering=10.0, brake=0.0, throttle=20.0))
        v = sup.validate_command_echo(
            now, FakeActuals(steering_actual_deg=9.2, brake_front=0, brake_rear=0, throttle_actual=19.0)
        )
        assert v.action == SupervisorAction.NONE


def test_echo_stuck_steering_flags_channel():
    sup = Supervisor()
    verdicts = []
    for i in range(60):
        now = i * 0.02
        sweep = 20.0 * math.sin(now * 3.0) + 25.0
        sup.observe_command(now, FakeCmd(steering=sweep, brake=0.0, throttle=0.0))
        verdicts.append(
            sup.validate_command_echo(
                now,
                FakeActuals(steering_actual_deg=0.0, brake_front=0, brake_rear=0, throttle_actual=0.0),
            )
        )
    tripped = [v for v in verdicts if v.action != SupervisorAction.NONE]
    assert tripped
    assert "steering" in tripped[0].cause


def test_echo_single_cycle_transient_tolerated():
    sup = Supervisor()
    for i in range(40):
        now = i * 0.02
        sup.observe_command(now, FakeCmd(steering=0.0, brake=0.0, throttle=20.0))
        throttle_echo = 19.0 if i != 25 else 45.0  # one bad sample
        v = sup.validate_command_echo(
            now, FakeActuals(steering_actual_deg=0.0, brake_front=0, brake_rear=0, throttle_actual=throttle_echo)
        )
        assert v.action == SupervisorAction.NONE


def test_step_latches_and_logs_once_per_onset():
    sup = supervisor_with_modules()
    sup.beat("estimator", 0.0)
    sup.beat("planner", 0.0)
    for k in range(5):
        sup.step(0.02 * k, cross_track=3.8)
    assert sup.latched.action == SupervisorAction.CONTROLLED_STOP
    assert len(sup.verdict_log) == 1
    # escalation to emergency is a new onset
    sup.beat("estimator", 0.01)
    sup.step(1.0, cross_track=0.0)
    assert sup.latched.action == SupervisorAction.EMERGENCY_STOP
    assert len(sup.verdict_log) == 2


def test_emergency_never_unlatches():
    sup = supervisor_with_modules()
    sup.beat("estimator", 0.01)
    sup.beat("planner", 0.45)
    sup.step(0.5, cross_track=0.0)
    assert sup.latched.action == SupervisorAction.EMERGENCY_STOP
    sup.beat("estimator", 10.0)
    sup.beat("planner", 10.0)
    v = sup.step(10.0, cross_track=0.0)
    assert v.action == SupervisorAction.EMERGENCY_STOP


def test_controlled_stop_directives_progress_to_supervised_stop():
    sup = Supervisor()
    sup.step(0.0, cross_track=3.9)
    d_fast = sup.directives(speed=40.0)
    assert d_fast.force_zero_cap and not d_fast.plant_emergency
    assert not d_fast.plant_supervised_stop
    d_slow = sup.directives(speed=0.3)
    assert d_slow.plant_supervised_stop


def test_emergency_directives():
    sup = supervisor_with_modules()
    sup.beat("estimator", 0.01)
    sup.step(0.5)
    d = sup.directives(speed=50.0)
    assert d.plant_emergency and d.force_zero_cap


def test_no_verdict_no_directives():
    sup = Supervisor()
    assert sup.directives(speed=10.0) == type(sup.directives())()


def test_stuck_controlled_stop_escalates():
    sup = Supervisor(controlled_stop_escalation_s=10.0)
    sup.step(0.0, cross_track=3.9, speed=50.0)
    assert sup.latched.action == SupervisorAction.CONTROLLED_STOP
    sup.step(9.0, speed=45.0)
    assert sup.latched.action == SupervisorAction.CONTROLLED_STOP
    sup.step(10.5, speed=45.0)
    assert sup.latched.action == SupervisorAction.EMERGENCY_STOP
    assert sup.verdict_log[-1].cause == "controlled_stop_stuck"
