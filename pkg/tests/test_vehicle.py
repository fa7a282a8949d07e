"""Plant dynamics, state machine, watchdog, and sensor emulation."""
from __future__ import annotations

import math

import numpy as np
import pytest

from racestack.vehicle import (
    ActuationCommand,
    FaultInjection,
    LowLevelState,
    RtkStatus,
    SensorNoise,
    VehicleParams,
    VehiclePlant,
)

QUIET = SensorNoise(
    gnss_sigma_fixed=0.0,
    gnss_sigma_float=0.0,
    heading_sigma_rad=0.0,
    gyro_sigma=0.0,
    accel_sigma=0.0,
    vibration_sigma=0.0,
)


def driving_plant(v_x=0.0, **kw) -> VehiclePlant:
    plant = VehiclePlant(noise=QUIET, v_x=v_x, **kw)
    plant.lowlevel = LowLevelState.DRIVING
    plant.actuation_test_passed = True
    if v_x > 1.0:
        plant.gear = min(
            6, 1 + int(np.searchsorted([15, 25, 33, 42, 51], v_x))
        )
        plant.cmd = ActuationCommand(0.0, 0.0, 0.0, plant.gear, 0)
    return plant


def run(plant, seconds, cmd_fn, cmd_period=0.02, dt=0.002):
    """Step the plant while issuing commands at 50 Hz with a live counter."""
    steps = int(round(seconds / dt))
    counter = 0
    per_cmd = int(round(cmd_period / dt))
    states = []
    for i in range(steps):
        if i % per_cmd == 0:
            counter = (counter + 1) & 0xFF
            cmd = cmd_fn(plant, counter)
            plant.apply_command(cmd)
        states.append(plant.step(dt))
    return states


def hold_cmd(throttle=0.0, brake=0.0, steering=0.0, gear=None):
    def fn(plant, counter):
        return ActuationCommand(
            throttle, brake, steering, gear if gear is not None else plant.gear, counter
        )

    return fn


# ---------------------------------------------------------------------------
# longitudinal / at-rest behavior


def test_at_rest_full_brake_stays_at_rest():
    plant = driving_plant(v_x=0.0)
    states = run(plant, 1.0, hold_cmd(throttle=0.0, brake=1800.0))
    assert states[-1].v_x == 0.0
    assert abs(states[-1].x) < 1e-12 and abs(states[-1].y) < 1e-12


def test_throttle_accelerates_and_brake_decelerates():
    plant = driving_plant(v_x=20.0)
    v0 = plant.v_x
    run(plant, 2.0, hold_cmd(throttle=40.0))
    assert plant.v_x > v0 + 2.0
    v1 = plant.v_x
    run(plant, 2.0, hold_cmd(brake=900.0))
    assert plant.v_x < v1 - 10.0


def test_lateral_dynamics_stable_at_speed():
    plant = driving_plant(v_x=50.0)
    plant.v_y = 1.0
    plant.yaw_rate = 0.2
    run(plant, 3.0, hold_cmd())
    assert abs(plant.v_y) < 0.02
    assert abs(plant.yaw_rate) < 0.02
    # independent oracle: the 2-state lateral model is Hurwitz for C > 0
    p = plant.p
    v = 50.0
    a11 = -(p.c_f + p.c_r) / (p.mass * v)
    a12 = (-p.l_f * p.c_f + p.l_r * p.c_r) / (p.mass * v) - v
    a21 = (-p.l_f * p.c_f + p.l_r * p.c_r) / (p.yaw_inertia * v)
    a22 = -(p.l_f**2 * p.c_f + p.l_r**2 * p.c_r) / (p.yaw_inertia * v)
    eig = np.linalg.eigvals(np.array([[a11, a12], [a21, a22]]))
    assert np.all(eig.real < 0)


def steady_state_oracle(p: VehicleParams, v: float, delta: float):
    """Closed-form (v_y, r) of the linear bicycle at fixed speed."""
    cd = math.cos(delta)
    a = np.array(
        [
            [
                -(p.c_f * cd + p.c_r) / (p.mass * v),
                (-p.l_f * p.c_f * cd + p.l_r * p.c_r) / (p.mass * v) - v,
            ],
            [
                (-p.l_f * p.c_f * cd + p.l_r * p.c_r) / (p.yaw_inertia * v),
                -(p.l_f**2 * p.c_f * cd + p.l_r**2 * p.c_r) / (p.yaw_inertia * v),
            ],
        ]
    )
    b = np.array([p.c_f * cd * delta / p.mass, p.l_f * p.c_f * cd * delta / p.yaw_inertia])
    v_y, r = np.linalg.solve(a, -b)
    return v_y, r


def test_steady_state_cornering_matches_bicycle_oracle():
    plant = driving_plant(v_x=50.0)
    plant.p = VehicleParams(drag_coeff=0.0)  # hold speed without thrust
    delta_road = math.radians(1.5)
    hand_wheel = math.degrees(delta_road) * plant.p.steering_ratio
    run(plant, 4.0, hold_cmd(steering=hand_wheel))
    v_y_ss, r_ss = steady_state_oracle(plant.p, plant.v_x, delta_road)
    assert plant.yaw_rate == pytest.approx(r_ss, rel=0.02)
    assert plant.v_y == pytest.approx(v_y_ss, rel=0.05)


def test_kinetic_energy_nonincreasing_when_coasting():
    plant = driving_plant(v_x=40.0)
    plant.p = VehicleParams(drag_coeff=0.0)
    plant.v_y = 1.5
    plant.yaw_rate = 0.1
    prev = None
    for _ in range(1500):
        s = plant.step(0.002)
        ke = 0.5 * plant.p.mass * (s.v_x**2 + s.v_y**2) + 0.5 * plant.p.yaw_inertia * s.yaw_rate**2
        if prev is not None:
            assert ke <= prev + 1e-9
        prev = ke


def test_front_slip_stays_linear_regime_in_hard_cornering():
    plant = driving_plant(v_x=29.7)
    plant.p = VehicleParams(drag_coeff=0.0)
    # steer for ~18 m/s^2 at 49 m radius
    delta = math.radians(3.0)
    run(plant, 4.0, hold_cmd(steering=math.degrees(delta) * 15.0))
    sigma_f = delta - math.atan2(
        plant.v_y + plant.p.l_f * plant.yaw_rate, plant.v_x
    )
    assert abs(sigma_f) < math.radians(4.0)


# ---------------------------------------------------------------------------
# state machine and watchdog


def test_watchdog_advancing_counters_stay_driving():
    plant = driving_plant(v_x=30.0)
    states = run(plant, 1.0, hold_cmd(throttle=20.0))
    assert states[-1].lowlevel == LowLevelState.DRIVING


def test_watchdog_frozen_counter_triggers_emergency_with_latched_steering():
    plant = driving_plant(v_x=50.0)
    run(plant, 0.5, hold_cmd(throttle=30.0, steering=20.0))
    steer_before = plant.steer_actual_deg
    frozen = ActuationCommand(30.0, 0.0, 20.0, plant.gear, rolling_counter=77)
    for _ in range(60):  # 120 ms of frozen counter at 500 Hz
        plant.apply_command(frozen)
        plant.step(0.002)
    assert plant.lowlevel == LowLevelState.EMERGENCY
    snap = plant.snapshot()
    assert snap.throttle_actual == 0.0
    assert snap.brake_front + snap.brake_rear == pytest.approx(1800.0)
    assert snap.steering_actual_deg == pytest.approx(steer_before, abs=1.0)


def test_watchdog_counter_wrap_is_an_advance():
    plant = driving_plant(v_x=30.0)
    counter = 250

    def fn(p, _):
        nonlocal counter
        counter = (counter + 1) & 0xFF
        return ActuationCommand(10.0, 0.0, 0.0, p.gear, counter)

    states = run(plant, 0.5, fn)
    assert states[-1].lowlevel == LowLevelState.DRIVING


def test_emergency_is_absorbing():
    plant = driving_plant(v_x=40.0)
    plant.set_emergency()
    run(plant, 0.5, hold_cmd(throttle=50.0))
    assert plant.lowlevel == LowLevelState.EMERGENCY
    plant.enable_driving()
    assert plant.lowlevel == LowLevelState.EMERGENCY
    # and the car is being braked to a stop
    assert plant.brake_actual == 1800.0
    assert plant.throttle_actual == 0.0


def test_emergency_rpm_decays_to_zero():
    plant = driving_plant(v_x=50.0)
    run(plant, 0.2, hold_cmd(throttle=30.0))
    plant.set_emergency()
    run(plant, 12.0, hold_cmd(throttle=30.0))
    assert plant.v_x < 0.5
    assert plant.snapshot().engine_rpm < 100.0


def test_actuation_test_passes_with_nominal_actuators():
    plant = VehiclePlant(noise=QUIET)
    ok, detail = plant.run_actuation_test()
    assert ok, detail
    assert plant.lowlevel == LowLevelState.ENGINE_ON


def test_actuation_test_fails_on_stuck_steering():
    plant = VehiclePlant(
        noise=QUIET, faults=FaultInjection(actuator_faults={"steering"})
    )
    ok, detail = plant.run_actuation_test()
    assert not ok
    assert detail == "steering"
    assert plant.lowlevel == LowLevelState.UNINIT


def test_actuation_test_fails_on_stuck_brake():
    plant = VehiclePlant(noise=QUIET, faults=FaultInjection(actuator_faults={"brake"}))
    ok, detail = plant.run_actuation_test()
    assert not ok
    assert detail == "brake"


def test_gear_changes_only_after_shift_time():
    plant = driving_plant(v_x=20.0)
    start_gear = plant.gear
    target = start_gear + 1
    states = run(plant, 0.4, hold_cmd(throttle=20.0, gear=target))
    assert all(s.gear == start_gear for s in states)
    states = run(plant, 0.2, hold_cmd(throttle=20.0, gear=target))
    assert states[-1].gear == target


# ---------------------------------------------------------------------------
# sensors


def test_zero_noise_gnss_equals_truth():
    plant = driving_plant(v_x=10.0)
    run(plant, 0.3, hold_cmd(throttle=10.0))
    fix = plant.sample_gnss()
    assert fix.x == plant.x and fix.y == plant.y
    assert fix.heading == pytest.approx(plant.yaw)
    assert fix.rtk_status == RtkStatus.RTK_FIXED


def test_gnss_noise_std_matches_configuration():
    noise = SensorNoise(gnss_sigma_fixed=0.02, heading_sigma_rad=0.0)
    plant = VehiclePlant(noise=noise, rng_gnss=np.random.default_rng(17))
    xs = np.array([plant.sample_gnss().x for _ in range(10_000)])
    assert abs(xs.std() - 0.02) / 0.02 < 0.10
    assert plant.sample_gnss().variance[0] == pytest.approx(0.02**2)


def test_gnss_dropout_window():
    faults = FaultInjection(rtk_dropouts=[(0.1, 0.2)])
    plant = driving_plant(v_x=10.0, faults=faults)
    seen = []
    for _ in range(150):
        plant.step(0.002)
        seen.append((plant.time, plant.sample_gnss()))
    for t, fix in seen:
        if 0.1 <= t < 0.2:
            assert fix is None
        else:
            assert fix is not None


def test_imu_reports_bank_aware_rates():
    plant = driving_plant(v_x=30.0)
    plant.bank_lookup = lambda x, y: -math.radians(9.2)
    plant.yaw_rate = 0.3
    plant.step(0.002)
    imu = plant.sample_imu()
    bank = -math.radians(9.2)
    assert imu.gyro[2] == pytest.approx(math.cos(bank) * plant.yaw_rate, rel=1e-6)
    assert imu.gyro[1] == pytest.approx(math.sin(bank) * plant.yaw_rate, rel=1e-6)


def test_nan_state_freezes_plant_with_fault():
    plant = driving_plant(v_x=10.0)
    plant.v_x = float("nan")
    with pytest.raises(Exception):
        plant.step(0.002)
    assert plant.frozen
