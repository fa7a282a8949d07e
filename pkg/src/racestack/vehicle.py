"""Ground-truth simulated race car.

Dynamic bicycle model with linear tires, a torque-mapped engine behind a
six-speed sequential box, rate-limited first-order actuators, the lower-level
operational state machine with its rolling-counter watchdog, and GNSS/IMU
emulation with fault injection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from .geometry import GRAVITY, wrap_angle


class LowLevelState(IntEnum):
    UNINIT = 0
    ACT_TEST = 1
    ENGINE_ON = 2
    DRIVING = 3
    SUPERVISED_STOP = 4
    EMERGENCY = 5


class RtkStatus(IntEnum):
    NONE = 0
    SINGLE = 1
    RTK_FLOAT = 2
    RTK_FIXED = 3


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.9718
    steering_ratio: float = 15.0
    max_steering_deg: float = 230.0  # hand-wheel
    max_throttle: float = 55.0  # percent
    max_brake_kpa: float = 1800.0
    mass: float = 750.0
    l_f: float = 1.30
    yaw_inertia: float = 1630.0
    c_f: float = 1.8e5  # N/rad
    c_r: float = 1.8e5
    drag_coeff: float = 1.2  # N s^2/m^2
    wheel_radius: float = 0.30
    # total reduction per gear (gearbox x final drive); 6th puts redline
    # (7200 rpm) at roughly 75 m/s wheel speed
    gear_ratios: tuple[float, ...] = (11.0, 8.2, 6.4, 5.2, 4.3, 2.95)
    torque_map_rpm: tuple[float, ...] = (1000.0, 2500.0, 4000.0, 5000.0, 6000.0, 7200.0)
    torque_map_nm: tuple[float, ...] = (240.0, 380.0, 480.0, 520.0, 500.0, 430.0)
    idle_rpm: float = 1000.0
    redline_rpm: float = 7200.0
    shift_time: float = 0.5
    brake_gain: float = 8.0  # N per kPa, total
    brake_split_front: float = 0.6
    steer_rate_dps: float = 600.0  # hand-wheel rate limit
    steer_tau: float = 0.05
    throttle_tau: float = 0.05
    brake_tau: float = 0.08
    watchdog_window: float = 0.1

    def __post_init__(self):
        if not (0 < self.l_f < self.wheelbase):
            raise ValueError("l_f must lie inside the wheelbase")
        if len(self.gear_ratios) != 6:
            raise ValueError("six gear ratios required")

    @property
    def l_r(self) -> float:
        return self.wheelbase - self.l_f

    @property
    def max_road_wheel_rad(self) -> float:
        return math.radians(self.max_steering_deg) / self.steering_ratio

    def engine_torque(self, rpm: float) -> float:
        return float(np.interp(rpm, self.torque_map_rpm, self.torque_map_nm))

    def rpm_from_speed(self, v: float, gear: int) -> float:
        wheel_omega = max(v, 0.0) / self.wheel_radius
        return wheel_omega * self.gear_ratios[gear - 1] * 60.0 / (2.0 * math.pi)


@dataclass(frozen=True)
class ActuationCommand:
    throttle: float  # percent, [0, 55]
    brake: float  # kPa, [0, 1800]
    steering: float  # hand-wheel degrees, [-230, 230]
    gear: int  # 1..6
    rolling_counter: int  # 8-bit wrapping

    def clamped(self, p: VehicleParams) -> "ActuationCommand":
        return replace(
            self,
            throttle=min(max(self.throttle, 0.0), p.max_throttle),
            brake=min(max(self.brake, 0.0), p.max_brake_kpa),
            steering=min(max(self.steering, -p.max_steering_deg), p.max_steering_deg),
            gear=min(max(self.gear, 1), 6),
            rolling_counter=self.rolling_counter & 0xFF,
        )


@dataclass(frozen=True)
class PlantState:
    time: float
    x: float
    y: float
    yaw: float
    v_x: float
    v_y: float
    yaw_rate: float
    engine_rpm: float
    gear: int
    road_wheel_angle: float  # rad
    brake_front: float  # kPa
    brake_rear: float
    throttle_actual: float  # percent
    steering_actual_deg: float  # hand-wheel degrees
    lowlevel: LowLevelState
    bank: float = 0.0  # road roll under the car, rad
    a_x: float = 0.0  # body-frame accelerations for IMU emulation
    a_y: float = 0.0

    @property
    def speed(self) -> float:
        return math.hypot(self.v_x, self.v_y)


@dataclass(frozen=True)
class GnssFix:
    stamp: float
    x: float
    y: float
    z: float
    heading: float
    variance: tuple[float, float, float]
    rtk_status: RtkStatus


@dataclass(frozen=True)
class ImuSample:
    stamp: float
    gyro: tuple[float, float, float]
    accel: tuple[float, float, float]


@dataclass
class SensorNoise:
    gnss_sigma_fixed: float = 0.02
    gnss_sigma_float: float = 0.5
    gnss_sigma_z_extra: float = 3.0  # multiplier on the z channel sigma
    heading_sigma_rad: float = math.radians(0.2)
    gyro_sigma: float = 0.005  # rad/s per sample at 125 Hz
    gyro_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    accel_sigma: float = 0.05
    vibration_sigma: float = 2.0  # band-limited accel corruption, m/s^2
    vibration_pole: float = 0.7  # AR(1) coefficient per sample

    def position_sigma(self, status: RtkStatus) -> float:
        if status == RtkStatus.RTK_FIXED:
            return self.gnss_sigma_fixed
        if status == RtkStatus.RTK_FLOAT:
            return self.gnss_sigma_float
        return 5.0


@dataclass
class FaultInjection:
    rtk_dropouts: list[tuple[float, float]] = field(default_factory=list)
    rtk_degrade: list[tuple[float, float]] = field(default_factory=list)  # FLOAT windows
    counter_freezes: list[tuple[float, float]] = field(default_factory=list)
    actuator_faults: set[str] = field(default_factory=set)  # steering|brake|throttle

    def in_window(self, windows: list[tuple[float, float]], t: float) -> bool:
        return any(t0 <= t < t1 for t0, t1 in windows)


class SimulationFault(Exception):
    pass


class VehiclePlant:
    """Owns the ground-truth vehicle state; advance with step()."""

    def __init__(
        self,
        params: VehicleParams | None = None,
        noise: SensorNoise | None = None,
        faults: FaultInjection | None = None,
        rng_gnss: np.random.Generator | None = None,
        rng_imu: np.random.Generator | None = None,
        bank_lookup=None,  # callable (x, y) -> road roll rad
        x: float = 0.0,
        y: float = 0.0,
        yaw: float = 0.0,
        v_x: float = 0.0,
        gear: int = 1,
    ):
        self.p = params or VehicleParams()
        self.noise = noise or SensorNoise()
        self.faults = faults or FaultInjection()
        self.rng_gnss = rng_gnss or np.random.default_rng(0)
        self.rng_imu = rng_imu or np.random.default_rng(1)
        self.bank_lookup = bank_lookup

        self.time = 0.0
        self.x, self.y, self.yaw = x, y, yaw
        self.v_x, self.v_y, self.yaw_rate = v_x, 0.0, 0.0
        self.gear = gear
        self.lowlevel = LowLevelState.UNINIT
        self.frozen = False

        self.road_wheel = 0.0  # rad
        self.steer_actual_deg = 0.0
        self.throttle_actual = 0.0
        self.brake_actual = 0.0  # total kPa before split
        self._accel_body = (0.0, 0.0)

        self.cmd = ActuationCommand(0.0, 0.0, 0.0, gear, 0)
        self._last_counter: int | None = None
        self._counter_change_time = 0.0
        self._shift_target: int | None = None
        self._shift_deadline = 0.0
        self._vib_state = np.zeros(3)
        self.actuation_test_passed = False

    # ------------------------------------------------------------------
    # State machine

    def run_actuation_test(self) -> tuple[bool, str]:
        """Sweep steering and pulse the brake through the actuator models and
        check that the echo tracks the command."""
        if self.lowlevel != LowLevelState.UNINIT:
            return False, "actuation test only allowed from UNINIT"
        self.lowlevel = LowLevelState.ACT_TEST
        dt = 0.01
        steer_ok = brake_ok = True
        steer = 0.0
        brake = 0.0
        for i in range(300):
            target_steer = 10.0 * math.sin(2.0 * math.pi * i / 150.0)
            target_brake = 400.0 if 100 <= i < 200 else 0.0
            steer = self._actuator_step(
                steer, target_steer, dt, self.p.steer_tau, self.p.steer_rate_dps, "steering"
            )
            brake = self._actuator_step(
                brake, target_brake, dt, self.p.brake_tau, None, "brake"
            )
            if i % 10 == 5:
                if abs(steer - target_steer) > 3.0 + 10.0 * dt / self.p.steer_tau:
                    steer_ok = False
                if abs(brake - target_brake) > 250.0:
                    brake_ok = False
        if not steer_ok:
            self.lowlevel = LowLevelState.UNINIT
            return False, "steering"
        if not brake_ok:
            self.lowlevel = LowLevelState.UNINIT
            return False, "brake"
        self.actuation_test_passed = True
        self.lowlevel = LowLevelState.ENGINE_ON
        return True, "ok"

    def enable_driving(self) -> None:
        if self.lowlevel == LowLevelState.ENGINE_ON:
            self.lowlevel = LowLevelState.DRIVING

    def set_emergency(self, reason: str = "commanded") -> None:
        if self.lowlevel != LowLevelState.EMERGENCY:
            self.emergency_reason = reason
        self.lowlevel = LowLevelState.EMERGENCY

    def set_supervised_stop(self) -> None:
        if self.lowlevel != LowLevelState.EMERGENCY:
            self.lowlevel = LowLevelState.SUPERVISED_STOP

    # ------------------------------------------------------------------
    # Command path

    def apply_command(self, cmd: ActuationCommand) -> str:
        """Latch a command; returns 'accept' or 'stale' (stale only reports
        what the watchdog will see, the command itself is still latched)."""
        if self.lowlevel < LowLevelState.ENGINE_ON:
            return "accept"
        counter = cmd.rolling_counter & 0xFF
        if self.faults.in_window(self.faults.counter_freezes, self.time):
            counter = self._last_counter if self._last_counter is not None else counter
            cmd = replace(cmd, rolling_counter=counter)
        if self._last_counter is None or counter != self._last_counter:
            self._last_counter = counter
            self._counter_change_time = self.time
        self.cmd = cmd.clamped(self.p)
        stale = (self.time - self._counter_change_time) > self.p.watchdog_window
        return "stale" if stale else "accept"

    def _watchdog_check(self) -> None:
        armed = self.lowlevel in (
            LowLevelState.ENGINE_ON,
            LowLevelState.DRIVING,
            LowLevelState.SUPERVISED_STOP,
        )
        if (
            armed
            and self._last_counter is not None
            and (self.time - self._counter_change_time) > self.p.watchdog_window
        ):
            self.set_emergency(reason="rolling counter stale")

    # ------------------------------------------------------------------
    # Dynamics

    def _actuator_step(self, actual, target, dt, tau, rate_limit, channel):
        if channel in self.faults.actuator_faults:
            return actual  # stuck actuator
        new = actual + (target - actual) * (dt / (tau + dt))
        if rate_limit is not None:
            max_delta = rate_limit * dt
            new = actual + min(max(new - actual, -max_delta), max_delta)
        return new

    def step(self, dt: float) -> PlantState:
        """Advance the plant by dt (substeps of <= 2 ms)."""
        if self.frozen:
            return self.snapshot()
        n_sub = max(1, int(math.ceil(dt / 0.002 - 1e-12)))
        sub = dt / n_sub
        for _ in range(n_sub):
            self._substep(sub)
        if not all(
            map(
                math.isfinite,
                (self.x, self.y, self.yaw, self.v_x, self.v_y, self.yaw_rate),
            )
        ):
            self.frozen = True
            raise SimulationFault("non-finite plant state; plant frozen")
        return self.snapshot()

    def _substep(self, dt: float) -> None:
        p = self.p
        self.time += dt
        self._watchdog_check()

        if self.lowlevel == LowLevelState.EMERGENCY:
            # brake slams to max, throttle cut, steering latched (held value)
            self.throttle_actual = 0.0
            self.brake_actual = p.max_brake_kpa
            steer_target = self.steer_actual_deg
            throttle_target = 0.0
            brake_target = p.max_brake_kpa
        elif self.lowlevel == LowLevelState.SUPERVISED_STOP:
            throttle_target = 0.0
            brake_target = max(self.cmd.brake, 600.0)
            steer_target = self.cmd.steering
        elif self.lowlevel == LowLevelState.DRIVING:
            throttle_target = self.cmd.throttle
            brake_target = self.cmd.brake
            steer_target = self.cmd.steering
        else:
            throttle_target = 0.0
            brake_target = self.cmd.brake
            steer_target = self.cmd.steering

        self.throttle_actual = self._actuator_step(
            self.throttle_actual, throttle_target, dt, p.throttle_tau, None, "throttle"
        )
        self.brake_actual = self._actuator_step(
            self.brake_actual, brake_target, dt, p.brake_tau, None, "brake"
        )
        self.steer_actual_deg = self._actuator_step(
            self.steer_actual_deg, steer_target, dt, p.steer_tau, p.steer_rate_dps, "steering"
        )
        self.road_wheel = math.radians(self.steer_actual_deg) / p.steering_ratio

        # gear shifting: 500 ms torque interruption, then the gear changes
        if self._shift_target is None and self.cmd.gear != self.gear:
            if abs(self.cmd.gear - self.gear) == 1 and self.lowlevel == LowLevelState.DRIVING:
                self._shift_target = self.cmd.gear
                self._shift_deadline = self.time + p.shift_time
        if self._shift_target is not None and self.time >= self._shift_deadline:
            self.gear = self._shift_target
            self._shift_target = None

        shifting = self._shift_target is not None
        rpm = p.rpm_from_speed(self.v_x, self.gear)
        if self.lowlevel in (LowLevelState.ENGINE_ON, LowLevelState.DRIVING, LowLevelState.SUPERVISED_STOP):
            rpm = max(rpm, p.idle_rpm)
        rpm = min(rpm, p.redline_rpm)
        self.engine_rpm = rpm

        drive_force = 0.0
        if self.lowlevel == LowLevelState.DRIVING and not shifting:
            throttle_frac = self.throttle_actual / p.max_throttle
            torque = p.engine_torque(rpm) * throttle_frac
            if rpm >= p.redline_rpm:
                torque = 0.0  # rev limiter
            drive_force = torque * p.gear_ratios[self.gear - 1] / p.wheel_radius

        brake_force = self.brake_actual * p.brake_gain
        drag_force = p.drag_coeff * self.v_x * abs(self.v_x)

        bank = self.bank_lookup(self.x, self.y) if self.bank_lookup else 0.0
        self._bank = bank

        v_x, v_y, r = self.v_x, self.v_y, self.yaw_rate
        delta = self.road_wheel
        if v_x > 0.5:
            sigma_f = delta - math.atan2(v_y + p.l_f * r, v_x)
            sigma_r = -math.atan2(v_y - p.l_r * r, v_x)
            f_yf = p.c_f * sigma_f
            f_yr = p.c_r * sigma_r
        else:
            # below walking pace the lateral model degenerates; bleed it off
            sigma_f = sigma_r = 0.0
            f_yf = f_yr = 0.0
            self.v_y *= max(0.0, 1.0 - 5.0 * dt)
            self.yaw_rate *= max(0.0, 1.0 - 5.0 * dt)
            v_y, r = self.v_y, self.yaw_rate

        # gravity component along body +y from road roll (positive roll
        # raises the left edge, pulling the car leftward when negative)
        g_lat = -GRAVITY * math.sin(bank)

        f_x = drive_force - math.copysign(brake_force, v_x) - drag_force - f_yf * math.sin(delta)
        f_y = f_yf * math.cos(delta) + f_yr + p.mass * g_lat

        a_x = f_x / p.mass + v_y * r
        a_y = f_y / p.mass - v_x * r
        self._accel_body = (f_x / p.mass, f_y / p.mass)

        r_dot = (p.l_f * f_yf * math.cos(delta) - p.l_r * f_yr) / p.yaw_inertia

        new_v_x = v_x + a_x * dt
        if v_x >= 0.0 and new_v_x < 0.0 and drive_force <= brake_force:
            new_v_x = 0.0  # brakes hold the car at rest instead of reversing
        self.v_x = new_v_x
        if v_x > 0.5:
            self.v_y = v_y + a_y * dt
            self.yaw_rate = r + r_dot * dt

        self.x += (self.v_x * math.cos(self.yaw) - self.v_y * math.sin(self.yaw)) * dt
        self.y += (self.v_x * math.sin(self.yaw) + self.v_y * math.cos(self.yaw)) * dt
        self.yaw = wrap_angle(self.yaw + self.yaw_rate * dt)

        if (
            self.lowlevel == LowLevelState.SUPERVISED_STOP
            and abs(self.v_x) < 0.05
        ):
            self.brake_actual = max(self.brake_actual, 600.0)

    def snapshot(self) -> PlantState:
        ax, ay = self._accel_body
        return PlantState(
            time=self.time,
            x=self.x,
            y=self.y,
            yaw=self.yaw,
            v_x=self.v_x,
            v_y=self.v_y,
            yaw_rate=self.yaw_rate,
            engine_rpm=getattr(self, "engine_rpm", 0.0),
            gear=self.gear,
            road_wheel_angle=self.road_wheel,
            brake_front=self.brake_actual * self.p.brake_split_front,
            brake_rear=self.brake_actual * (1.0 - self.p.brake_split_front),
            throttle_actual=self.throttle_actual,
            steering_actual_deg=self.steer_actual_deg,
            lowlevel=self.lowlevel,
            bank=getattr(self, "_bank", 0.0),
            a_x=ax,
            a_y=ay,
        )

    # ------------------------------------------------------------------
    # Sensor emulation

    def sample_gnss(self) -> GnssFix | None:
        t = self.time
        if self.faults.in_window(self.faults.rtk_dropouts, t):
            return None
        status = RtkStatus.RTK_FIXED
        if self.faults.in_window(self.faults.rtk_degrade, t):
            status = RtkStatus.RTK_FLOAT
        sigma = self.noise.position_sigma(status)
        sigma_z = sigma * self.noise.gnss_sigma_z_extra
        nx, ny, nz = (
            self.rng_gnss.normal(0.0, sigma) if sigma > 0 else 0.0,
            self.rng_gnss.normal(0.0, sigma) if sigma > 0 else 0.0,
            self.rng_gnss.normal(0.0, sigma_z) if sigma_z > 0 else 0.0,
        )
        h_sig = self.noise.heading_sigma_rad
        nh = self.rng_gnss.normal(0.0, h_sig) if h_sig > 0 else 0.0
        return GnssFix(
            stamp=t,
            x=self.x + nx,
            y=self.y + ny,
            z=0.0 + nz,
            heading=wrap_angle(self.yaw + nh),
            variance=(max(sigma, 1e-6) ** 2, max(sigma, 1e-6) ** 2, max(sigma_z, 1e-6) ** 2),
            rtk_status=status,
        )

    def sample_imu(self) -> ImuSample:
        bank = getattr(self, "_bank", 0.0)
        # body rates for a vehicle riding a banked surface at this yaw rate
        wx = 0.0
        wy = math.sin(bank) * self.yaw_rate
        wz = math.cos(bank) * self.yaw_rate
        ax_b, ay_b = self._accel_body
        # specific force: f = a - g in body axes (z up, flat-road projection)
        f_x = ax_b
        f_y = ay_b + GRAVITY * math.sin(bank)
        f_z = GRAVITY * math.cos(bank)
        n = self.noise
        self._vib_state = n.vibration_pole * self._vib_state + self.rng_imu.normal(
            0.0, n.vibration_sigma, 3
        ) * math.sqrt(1.0 - n.vibration_pole**2)
        gyro_noise = (
            self.rng_imu.normal(0.0, n.gyro_sigma, 3) if n.gyro_sigma > 0 else np.zeros(3)
        )
        accel_noise = (
            self.rng_imu.normal(0.0, n.accel_sigma, 3) if n.accel_sigma > 0 else np.zeros(3)
        )
        vib = self._vib_state if n.vibration_sigma > 0 else np.zeros(3)
        return ImuSample(
            stamp=self.time,
            gyro=(
                wx + n.gyro_bias[0] + gyro_noise[0],
                wy + n.gyro_bias[1] + gyro_noise[1],
                wz + n.gyro_bias[2] + gyro_noise[2],
            ),
            accel=(
                f_x + accel_noise[0] + vib[0],
                f_y + accel_noise[1] + vib[1],
                f_z + accel_noise[2] + vib[2],
            ),
        )
