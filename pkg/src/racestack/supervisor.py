"""Supervisory safety layer above the plant's own state machine.

Watches module heartbeats, the cross-track error, and command-vs-actual
echoes; emits latched verdicts and stop directives (controlled stop rides
the raceline down to rest, emergency stop slams the plant)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum


class SupervisorAction(IntEnum):
    NONE = 0
    CONTROLLED_STOP = 1
    EMERGENCY_STOP = 2


class Criticality(IntEnum):
    CONTROLLED_STOP = 1
    EMERGENCY = 2


@dataclass(frozen=True)
class SupervisorVerdict:
    action: SupervisorAction
    cause: str
    stamp: float


@dataclass(frozen=True)
class StopDirectives:
    force_zero_cap: bool = False
    plant_emergency: bool = False
    plant_supervised_stop: bool = False


@dataclass
class HeartbeatEntry:
    period: float
    timeout: float
    criticality: Criticality
    last_beat: float = -1.0

    def __post_init__(self):
        if self.timeout < 2.0 * self.period:
            raise ValueError("heartbeat timeout must be at least twice the period")


@dataclass(frozen=True)
class EchoTolerances:
    steering_deg: float = 3.0
    brake_kpa: float = 100.0
    throttle_pct: float = 5.0
    lag_allowance: float = 0.2  # compare actuals against the command this old
    persistence_cycles: int = 10


class Supervisor:
    def __init__(
        self,
        cross_track_limit: float = 3.5,
        echo: EchoTolerances | None = None,
        controlled_stop_escalation_s: float = 10.0,
        stop_speed: float = 0.5,
    ):
        self.cross_track_limit = cross_track_limit
        self.echo = echo or EchoTolerances()
        self.controlled_stop_escalation_s = controlled_stop_escalation_s
        self.stop_speed = stop_speed
        self.registry: dict[str, HeartbeatEntry] = {}
        self.latched: SupervisorVerdict | None = None
        self._mismatch_counts: dict[str, int] = {}
        self._cmd_trail: list[tuple[float, object]] = []
        self._controlled_since: float | None = None
        self.verdict_log: list[SupervisorVerdict] = []

    # ------------------------------------------------------------------

    def register(
        self, module: str, period: float, timeout: float, criticality: Criticality
    ) -> None:
        self.registry[module] = HeartbeatEntry(
            period=period, timeout=timeout, criticality=criticality
        )

    def beat(self, module: str, stamp: float) -> None:
        self.registry[module].last_beat = stamp

    def check_heartbeats(self, now: float) -> SupervisorVerdict:
        worst = SupervisorVerdict(SupervisorAction.NONE, "", now)
        for name, entry in self.registry.items():
            if entry.last_beat < 0:
                continue  # not started yet
            if now - entry.last_beat > entry.timeout:
                if entry.criticality == Criticality.EMERGENCY:
                    return SupervisorVerdict(
                        SupervisorAction.EMERGENCY_STOP, f"heartbeat:{name}", now
                    )
                worst = SupervisorVerdict(
                    SupervisorAction.CONTROLLED_STOP, f"heartbeat:{name}", now
                )
        return worst

    def check_cross_track(self, e_ct: float, now: float = 0.0) -> SupervisorVerdict:
        if math.isnan(e_ct):
            return SupervisorVerdict(
                SupervisorAction.EMERGENCY_STOP, "cross_track:nan", now
            )
        if abs(e_ct) > self.cross_track_limit:
            return SupervisorVerdict(
                SupervisorAction.CONTROLLED_STOP, f"cross_track:{e_ct:.2f}", now
            )
        return SupervisorVerdict(SupervisorAction.NONE, "", now)

    # ------------------------------------------------------------------

    def observe_command(self, now: float, cmd) -> None:
        self._cmd_trail.append((now, cmd))
        horizon = now - 2.0 * self.echo.lag_allowance
        while self._cmd_trail and self._cmd_trail[0][0] < horizon:
            self._cmd_trail.pop(0)

    def validate_command_echo(self, now: float, actuals) -> SupervisorVerdict:
        """Check each actual against the envelope of recent commands (the
        actuator may lag anywhere inside the window); a persistent mismatch
        on any channel is a controlled stop."""
        window = [
            cmd
            for stamp, cmd in self._cmd_trail
            if stamp <= now - 1e-9 and stamp >= now - 2.0 * self.echo.lag_allowance
        ]
        if not window:
            return SupervisorVerdict(SupervisorAction.NONE, "", now)
        tol = self.echo

        def in_envelope(actual, values, tolerance):
            return min(values) - tolerance <= actual <= max(values) + tolerance

        checks = {
            "steering": in_envelope(
                actuals.steering_actual_deg,
                [c.steering for c in window],
                tol.steering_deg,
            ),
            "brake": in_envelope(
                actuals.brake_front + actuals.brake_rear,
                [c.brake for c in window],
                tol.brake_kpa,
            ),
            "throttle": in_envelope(
                actuals.throttle_actual,
                [c.throttle for c in window],
                tol.throttle_pct,
            ),
        }
        for channel, ok in checks.items():
            if ok:
                self._mismatch_counts[channel] = 0
            else:
                self._mismatch_counts[channel] = self._mismatch_counts.get(channel, 0) + 1
                if self._mismatch_counts[channel] >= tol.persistence_cycles:
                    return SupervisorVerdict(
                        SupervisorAction.CONTROLLED_STOP, f"echo:{channel}", now
                    )
        return SupervisorVerdict(SupervisorAction.NONE, "", now)

    # ------------------------------------------------------------------

    def step(
        self,
        now: float,
        cross_track: float | None = None,
        actuals=None,
        speed: float | None = None,
        echo_active: bool = True,
    ) -> SupervisorVerdict:
        """One supervisor cycle; returns the latched worst verdict so far.

        A new verdict is appended to verdict_log only at its onset.
        EMERGENCY dominates CONTROLLED_STOP; neither ever unlatches.
        """
        candidates = [self.check_heartbeats(now)]
        if cross_track is not None:
            candidates.append(self.check_cross_track(cross_track, now))
        if actuals is not None and echo_active:
            candidates.append(self.validate_command_echo(now, actuals))
        verdict = max(candidates, key=lambda v: v.action)

        if self.latched is not None:
            # escalate a stuck controlled stop
            if (
                self.latched.action == SupervisorAction.CONTROLLED_STOP
                and speed is not None
                and speed >= self.stop_speed
                and self._controlled_since is not None
                and now - self._controlled_since > self.controlled_stop_escalation_s
            ):
                self._latch(
                    SupervisorVerdict(
                        SupervisorAction.EMERGENCY_STOP, "controlled_stop_stuck", now
                    )
                )
            elif verdict.action > self.latched.action:
                self._latch(verdict)
            return self.latched

        if verdict.action != SupervisorAction.NONE:
            self._latch(verdict)
            return self.latched
        return verdict

    def _latch(self, verdict: SupervisorVerdict) -> None:
        if (
            self.latched is None
            or verdict.action > self.latched.action
        ):
            self.latched = verdict
            self.verdict_log.append(verdict)
            if verdict.action == SupervisorAction.CONTROLLED_STOP:
                self._controlled_since = verdict.stamp

    def directives(self, speed: float | None = None) -> StopDirectives:
        if self.latched is None:
            return StopDirectives()
        if self.latched.action == SupervisorAction.EMERGENCY_STOP:
            return StopDirectives(force_zero_cap=True, plant_emergency=True)
        stopped = speed is not None and speed < self.stop_speed
        return StopDirectives(
            force_zero_cap=True, plant_supervised_stop=stopped
        )
