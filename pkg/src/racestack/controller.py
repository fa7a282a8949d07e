"""Vehicle control: longitudinal PID with deadbands and engine braking,
RPM-table gear shifting, pure-pursuit steering with adaptive lookahead,
joystick override, and timeout failsafe."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class ControlSource(IntEnum):
    AUTONOMY = 0
    JOYSTICK = 1
    FAILSAFE = 2


@dataclass(frozen=True)
class PidGains:
    kp: float
    ki: float
    kd: float
    i_max: float
    cmd_max: float


@dataclass(frozen=True)
class ControlParams:
    loop_hz: float = 50.0
    lateral_error_threshold: float = 3.5
    trajectory_timeout: float = 0.2
    joystick_timeout: float = 5.0
    throttle_deadband: float = 0.2  # m/s
    brake_deadband: float = 0.4  # m/s on dv (see module notes)
    throttle_pid: PidGains = PidGains(kp=17.0, ki=16.0, kd=1.1, i_max=0.5, cmd_max=55.0)
    brake_pid: PidGains = PidGains(kp=300.0, ki=0.0, kd=2.0, i_max=15.0, cmd_max=1800.0)
    pp_gain: float = 1.0
    lookahead_ratio: float = 0.63
    lookahead_min: float = 15.0
    lookahead_max: float = 27.0
    wheelbase: float = 2.9718
    steering_ratio: float = 15.0
    max_hand_wheel_deg: float = 230.0
    shift_up_rpm: tuple[float, ...] = (4000.0, 4200.0, 4300.0, 4400.0, 4500.0)
    shift_down_rpm: tuple[float, ...] = (2000.0, 2100.0, 2200.0, 2300.0, 2400.0)
    shift_hold: float = 0.5
    derivative_filter_tau: float = 0.05
    reference_index: int = 2  # third path element: two steps past the projection


class Pid:
    """PID with clamped integral and a first-order filtered derivative."""

    def __init__(self, gains: PidGains, d_filter_tau: float = 0.05):
        self.g = gains
        self.tau = d_filter_tau
        self.reset()

    def reset(self) -> None:
        self.integral = 0.0
        self.prev_error: float | None = None
        self.d_filtered = 0.0

    def step(self, error: float, dt: float) -> float:
        g = self.g
        self.integral += error * dt
        self.integral = min(max(self.integral, -g.i_max), g.i_max)
        if self.prev_error is None:
            raw_d = 0.0 if dt <= 0 else error / max(dt, 1e-9)
        else:
            raw_d = (error - self.prev_error) / max(dt, 1e-9)
        alpha = dt / (self.tau + dt) if dt > 0 else 1.0
        self.d_filtered += alpha * (raw_d - self.d_filtered)
        self.prev_error = error
        out = g.kp * error + g.ki * self.integral + g.kd * self.d_filtered
        return min(max(out, 0.0), g.cmd_max)


def adaptive_lookahead(v_car: float, p: ControlParams) -> float:
    return min(p.lookahead_min + p.lookahead_ratio * max(v_car, 0.0), p.lookahead_max)


def gear_logic(rpm: float, gear: int, p: ControlParams) -> int:
    """Next gear command from the RPM shift table; never skips gears."""
    if not 1 <= gear <= 6:
        raise ValueError(f"gear {gear} out of range")
    if gear < 6 and rpm > p.shift_up_rpm[gear - 1]:
        return gear + 1
    if gear > 1 and rpm < p.shift_down_rpm[gear - 2]:
        return gear - 1
    return gear


def find_lookahead_point(points_xy: np.ndarray, ld: float):
    """First path point at distance >= ld from the origin, linearly
    interpolated on the segment crossing the lookahead circle.  Returns
    (point, clipped) where clipped means the whole path was shorter."""
    d = np.hypot(points_xy[:, 0], points_xy[:, 1])
    beyond = np.nonzero(d >= ld)[0]
    if beyond.size == 0:
        return points_xy[-1].copy(), True
    j = int(beyond[0])
    if j == 0:
        return points_xy[0].copy(), False
    a, b = points_xy[j - 1], points_xy[j]
    da, db = d[j - 1], d[j]
    w = 0.0 if db - da < 1e-12 else (ld - da) / (db - da)
    return a + w * (b - a), False


def steering_from_lookahead_angle(
    lookahead_angle: float, ld: float, p: ControlParams
) -> float:
    """Pure-pursuit hand-wheel command (degrees) for a given lookahead angle
    and distance: delta = atan(2 L sin(angle) / Ld), clamped at the road
    wheels, then scaled by the steering ratio and clamped at the hand wheel."""
    delta = math.atan2(2.0 * p.wheelbase * math.sin(lookahead_angle), ld)
    max_road = math.radians(p.max_hand_wheel_deg) / p.steering_ratio
    delta = min(max(delta, -max_road), max_road)
    hand_wheel = math.degrees(delta * p.pp_gain * p.steering_ratio)
    return min(max(hand_wheel, -p.max_hand_wheel_deg), p.max_hand_wheel_deg)


def pure_pursuit(
    local_points: np.ndarray, v_car: float, p: ControlParams
) -> tuple[float, float, float, bool]:
    """Hand-wheel steering command (degrees) from the local path.

    Returns (hand_wheel_deg, lookahead_distance, lookahead_angle, clipped).
    """
    ld = adaptive_lookahead(v_car, p)
    target, clipped = find_lookahead_point(local_points[:, :2], ld)
    lookahead_angle = math.atan2(target[1], target[0])
    hand_wheel = steering_from_lookahead_angle(lookahead_angle, ld, p)
    return hand_wheel, ld, lookahead_angle, clipped


@dataclass(frozen=True)
class ControllerOutput:
    throttle: float
    brake: float
    steering: float  # hand-wheel degrees
    gear_cmd: int
    source: ControlSource
    lookahead_distance: float = 0.0
    lookahead_angle: float = 0.0
    target_velocity: float = 0.0


@dataclass
class JoystickState:
    override: bool = False
    steering: float = 0.0  # hand-wheel degrees
    brake: float = 0.0  # kPa
    stamp: float = -1e9


class Controller:
    """50 Hz control cycle with timeout failsafe and joystick override."""

    def __init__(self, params: ControlParams | None = None):
        self.p = params or ControlParams()
        self.throttle_pid = Pid(self.p.throttle_pid, self.p.derivative_filter_tau)
        self.brake_pid = Pid(self.p.brake_pid, self.p.derivative_filter_tau)
        self.last_steering = 0.0
        self.last_shift_time = -1e9
        self.last_gear_cmd = 1

    def longitudinal(self, v_ref: float, v_car: float, dt: float) -> tuple[float, float]:
        """Throttle/brake split around the deadbands; the gap between them
        is engine braking (both zero)."""
        dv = v_ref - v_car
        if dv > self.p.throttle_deadband:
            self.brake_pid.reset()
            return self.throttle_pid.step(dv, dt), 0.0
        if dv < -self.p.brake_deadband:
            self.throttle_pid.reset()
            return 0.0, self.brake_pid.step(-dv, dt)
        self.throttle_pid.reset()
        self.brake_pid.reset()
        return 0.0, 0.0

    def gear_cycle(self, rpm: float, gear: int, now: float) -> int:
        if now - self.last_shift_time < self.p.shift_hold:
            return self.last_gear_cmd
        cmd = gear_logic(rpm, gear, self.p)
        if cmd != gear:
            self.last_shift_time = now
        self.last_gear_cmd = cmd
        return cmd

    def control_cycle(
        self,
        now: float,
        local_path,
        path_stamp: float,
        localization_stale: bool,
        v_car: float,
        rpm: float,
        gear: int,
        joystick: JoystickState | None = None,
        dt: float | None = None,
    ) -> ControllerOutput:
        dt = dt if dt is not None else 1.0 / self.p.loop_hz
        p = self.p

        path_stale = local_path is None or (now - path_stamp) > p.trajectory_timeout
        if path_stale or localization_stale:
            self.throttle_pid.reset()
            self.brake_pid.reset()
            return ControllerOutput(
                throttle=0.0,
                brake=p.brake_pid.cmd_max,
                steering=self.last_steering,
                gear_cmd=gear,
                source=ControlSource.FAILSAFE,
            )

        if (
            joystick is not None
            and joystick.override
            and (now - joystick.stamp) <= p.joystick_timeout
        ):
            self.last_steering = joystick.steering
            self.throttle_pid.reset()
            self.brake_pid.reset()
            return ControllerOutput(
                throttle=0.0,
                brake=min(max(joystick.brake, 0.0), p.brake_pid.cmd_max),
                steering=joystick.steering,
                gear_cmd=gear,
                source=ControlSource.JOYSTICK,
            )

        points = local_path.points
        ref_i = min(p.reference_index, len(points) - 1)
        v_ref = float(points[ref_i, 3])
        throttle, brake = self.longitudinal(v_ref, v_car, dt)
        gear_cmd = self.gear_cycle(rpm, gear, now)
        steering, ld, angle, _ = pure_pursuit(points, v_car, p)
        self.last_steering = steering
        return ControllerOutput(
            throttle=throttle,
            brake=brake,
            steering=steering,
            gear_cmd=gear_cmd,
            source=ControlSource.AUTONOMY,
            lookahead_distance=ld,
            lookahead_angle=angle,
            target_velocity=v_ref,
        )
