"""Closed-loop stack assembly on the deterministic runtime.

Task names are numbered so the lexicographic tie-break at coincident ticks
fixes the data flow per tick: plant physics, sensors, estimator, planner,
controller, supervisor, telemetry, then the scripted base station.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import track as track_mod
from .controller import Controller, ControlSource, JoystickState
from .estimator import Eskf, EstimatorStatus
from .planner import FlagState, Planner, TrackFlag, VehFlag
from .runtime import FAULT_TOPIC, RngPool, Scheduler
from .scenario import ScenarioConfig
from .supervisor import Criticality, Supervisor, SupervisorAction
from .telemetry import (
    BasestationFrame,
    BasestationReceiver,
    DashboardFrame,
    DashboardReceiver,
    LogWriter,
    LoopbackDatagram,
    NdjsonBridgeServer,
    encode_basestation,
    encode_dashboard,
    split_stamp,
)
from .vehicle import ActuationCommand, LowLevelState, VehiclePlant

TOPICS_LOGGED = {
    "plant_state",
    "imu",
    "gnss",
    "estimated_state",
    "tracking",
    "command",
    "dashboard",
    "flags",
    "verdict",
    FAULT_TOPIC,
}


def _to_payload(value) -> bytes:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        # shallow vars(): every logged dataclass holds only scalars/tuples,
        # and asdict's recursive deep copy is measurable at 125 Hz
        value = vars(value)
    return json.dumps(value, sort_keys=True, separators=(",", ":")).encode()


def build_track(cfg: ScenarioConfig) -> track_mod.TrackBoundaries:
    t = cfg.track
    if t.kind == "oval":
        return track_mod.make_oval_boundaries(
            straight_long=t.straight_long,
            straight_short=t.straight_short,
            corner_radius=t.corner_radius,
            width=t.width,
            bank_deg=t.bank_deg,
            spacing=t.spacing,
        )
    if t.kind == "annulus":
        return track_mod.make_annulus_boundaries(
            t.r_inner, t.r_outer, spacing=t.spacing, flat_banking=True
        )
    if t.kind == "straight":
        return track_mod.make_straight_boundaries(
            t.length, t.width, spacing=t.spacing, flat_banking=True
        )
    if t.kind == "file":
        return track_mod.load_boundaries(t.file, fmt=t.format or None, spacing=t.spacing)
    raise ValueError(f"unknown track kind {t.kind!r}")


def obtain_raceline(cfg: ScenarioConfig, cache_dir: Path | None = None):
    """Load the configured raceline CSV, or build one from the track (cached
    next to the run when a cache directory is given)."""
    if cfg.raceline.file:
        return track_mod.load_raceline(cfg.raceline.file)
    cache = None
    if cache_dir is not None:
        tag = (
            f"{cfg.track.kind}_{cfg.track.spacing}_{cfg.raceline.margin}_"
            f"{cfg.track.corner_radius}_{cfg.track.width}_{cfg.track.bank_deg}_"
            f"{cfg.track.r_inner}_{cfg.track.r_outer}_{cfg.track.length}"
        ).replace(".", "p")
        cache = Path(cache_dir) / f"raceline_{tag}.csv"
        if cache.exists():
            return track_mod.load_raceline(cache)
    boundaries = build_track(cfg)
    raceline = track_mod.build_raceline(
        boundaries,
        margin=cfg.raceline.margin,
        params=cfg.raceline.velocity_params(),
        smooth_window=cfg.track.smooth_window,
    )
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        track_mod.save_raceline(raceline, cache)
    return raceline


class ScriptedBasestation:
    """Desk-side operator: watches dashboard frames coming over the wire,
    counts start-finish crossings, and answers with basestation frames
    carrying the per-lap speed cap and scheduled flags."""

    def __init__(self, cfg: ScenarioConfig, raceline, endpoint):
        self.cfg = cfg
        self.raceline = raceline
        self.endpoint = endpoint
        self.rx = DashboardReceiver(endpoint)
        self.crossings = 0
        self._s_prev: float | None = None
        self._armed = False  # must pass half a lap before counting a crossing

    def current_cap(self) -> float:
        # caps are per started lap; the approach before the first crossing
        # runs at the first lap's cap
        caps = self.cfg.remote.lap_caps
        return caps[min(max(self.crossings - 1, 0), len(caps) - 1)]

    def _scheduled(self, schedule, now: float, default: int) -> int:
        value = default
        for t, flag in schedule:
            if now >= t:
                value = flag
        return value

    def step(self, now: float) -> BasestationFrame:
        for frame in self.rx.poll():
            s = track_mod_nearest(self.raceline, frame.position_x, frame.position_y)
            half = self.raceline.total_length / 2
            if self._s_prev is None:
                self._armed = s >= half
            else:
                if not self._armed and self._s_prev < half <= s:
                    self._armed = True
                if self._armed and s < self._s_prev - half:
                    self.crossings += 1
                    self._armed = False
            self._s_prev = s
        remote = self.cfg.remote
        joystick_on = 0 <= remote.joystick_override_at <= now
        sec, nsec = split_stamp(now)
        frame = BasestationFrame(
            stamp_sec=sec,
            stamp_nsec=nsec,
            v_max=self.current_cap(),
            raceline_index=0,
            veh_flag=self._scheduled(remote.veh_flag_schedule, now, VehFlag.NONE),
            track_flag=self._scheduled(remote.track_flag_schedule, now, TrackFlag.GREEN),
            enable_engine=True,
            enable_driving=True,
            enable_joystick_control=joystick_on,
            target_velocity=0.0,
            steering_cmd=remote.joystick_steering if joystick_on else 0.0,
            brake_amount=remote.joystick_brake if joystick_on else 0.0,
            throttle_lockout=False,
        )
        self.endpoint.send(encode_basestation(frame))
        return frame


def track_mod_nearest(raceline, x: float, y: float) -> float:
    """Coarse sample-grid nearest station (base-station side map lookup)."""
    pts = raceline.samples[:, :2]
    i = int(np.argmin((pts[:, 0] - x) ** 2 + (pts[:, 1] - y) ** 2))
    return float(raceline.stations[i])


class RacingStack:
    """All tasks wired onto one scheduler, ready to advance()."""

    def __init__(
        self,
        cfg: ScenarioConfig,
        run_dir: Path | None = None,
        raceline=None,
        bridge: NdjsonBridgeServer | None = None,
    ):
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir else None
        self.raceline = raceline if raceline is not None else obtain_raceline(
            cfg, self.run_dir
        )
        self.bridge = bridge
        self.rng = RngPool(cfg.seed)
        self.sched = Scheduler()
        bus = self.sched.bus

        # --- plant -----------------------------------------------------
        rl = self.raceline
        start_s = rl.wrap_s(cfg.init.station)
        x0, y0, heading0, _, _, _ = rl.eval(start_s)
        plant_gear = 1 + int(np.searchsorted([15, 25, 33, 42, 51], cfg.init.speed))
        self.plant = VehiclePlant(
            params=cfg.vehicle,
            noise=cfg.noise,
            faults=cfg.faults.to_injection(),
            rng_gnss=self.rng.stream("gnss"),
            rng_imu=self.rng.stream("imu"),
            bank_lookup=self._bank_lookup,
            x=float(x0),
            y=float(y0),
            yaw=float(heading0),
            v_x=cfg.init.speed,
            gear=min(plant_gear, 6),
        )
        ok, detail = self.plant.run_actuation_test()
        if not ok:
            bus.publish_fault("plant", f"actuation test failed: {detail}")
        else:
            # scenarios start pre-armed: engine running, driving enabled by
            # the (scripted) base station before the clock starts
            self.plant.enable_driving()
        # --- modules ----------------------------------------------------
        self.eskf = Eskf(
            dataclasses.replace(
                cfg.estimator, wheelbase=cfg.vehicle.wheelbase, l_f=cfg.vehicle.l_f
            )
        )
        self.planner = Planner([rl], cfg.planner)
        self.controller = Controller(
            dataclasses.replace(
                cfg.control,
                wheelbase=cfg.vehicle.wheelbase,
                steering_ratio=cfg.vehicle.steering_ratio,
                max_hand_wheel_deg=cfg.vehicle.max_steering_deg,
            )
        )
        self.supervisor = Supervisor(
            cross_track_limit=cfg.control.lateral_error_threshold
        )
        self.supervisor.register(
            "estimator", period=0.008, timeout=0.2, criticality=Criticality.EMERGENCY
        )
        self.supervisor.register(
            "planner", period=0.02, timeout=0.2, criticality=Criticality.CONTROLLED_STOP
        )
        # remote pre-armed with the first lap cap so the clock starts green
        self.flags = FlagState(
            v_max_remote=cfg.remote.lap_caps[0], last_remote_stamp=0.0
        )
        self.joystick = JoystickState()
        self._counter = 0
        self._plant_step_count = 0
        self._emergency_seen = False
        self._last_fix_processed = -1.0
        # GNSS is already up when the stack boots; seed the filter
        first_fix = self.plant.sample_gnss()
        if first_fix is not None:
            self.eskf.initialize_from_fix(first_fix)

        # --- telemetry --------------------------------------------------
        loop = LoopbackDatagram()
        self.car_endpoint = loop.endpoint_a()
        self.base_endpoint = loop.endpoint_b()
        self.base_rx = BasestationReceiver(self.car_endpoint)
        self.basestation = ScriptedBasestation(cfg, rl, self.base_endpoint)
        self.log = (
            LogWriter(self.run_dir, "main", budget=cfg.logging.chunk_budget)
            if self.run_dir
            else None
        )

        # --- topics -----------------------------------------------------
        for topic, writer in [
            ("plant_state", "plant"),
            ("imu", "plant"),
            ("gnss", "plant"),
            ("estimated_state", "estimator"),
            ("local_path", "planner"),
            ("tracking", "planner"),
            ("command", "controller"),
            ("verdict", "supervisor"),
            ("dashboard", "telemetry"),
            ("flags", "base_rx"),
        ]:
            bus.advertise(topic, writer=writer, depth=32)
        if self.log is not None:
            bus.add_publish_hook(self._log_hook)

        # --- tasks (names define same-tick ordering) ---------------------
        self.sched.add_task("00_plant", 0.002, self._task_plant)
        self.sched.add_task("05_imu", 0.008, self._task_imu)
        self.sched.add_task("06_gnss", 0.05, self._task_gnss)
        self.sched.add_task("10_estimator", 0.008, self._task_estimator)
        self.sched.add_task("20_planner", 0.02, self._task_planner)
        self.sched.add_task("30_controller", 0.02, self._task_controller)
        self.sched.add_task("40_supervisor", 0.02, self._task_supervisor)
        self.sched.add_task("50_dash_tx", 0.1, self._task_dashboard_tx)
        self.sched.add_task("55_base_rx", 0.02, self._task_base_rx)
        self.sched.add_task("60_basestation", 1.0 / cfg.remote.rate_hz, self._task_basestation)

    # ------------------------------------------------------------------

    def _bank_lookup(self, x: float, y: float) -> float:
        if self.raceline.banking is None:
            return 0.0
        s = getattr(self, "_last_s_star", None)
        if s is None:
            s = track_mod_nearest(self.raceline, x, y)
        return float(self.raceline.bank(s))

    def _log_hook(self, topic: str, rec) -> None:
        if topic not in TOPICS_LOGGED or self.log is None:
            return
        if topic == "plant_state":
            self._plant_step_count += 1
            if self._plant_step_count % self.cfg.logging.plant_decimation != 0:
                return
        try:
            self.log.write(topic, rec.tick, _to_payload(rec.value))
        except OSError:
            self.sched.bus.publish_fault("logger", "disk failure; recording disabled")

    # ------------------------------------------------------------------
    # tasks

    def _task_plant(self) -> None:
        bus = self.sched.bus
        cmd_rec = bus.latest("command")
        if cmd_rec is not None:
            self.plant.apply_command(cmd_rec.value)
        state = self.plant.step(0.002)
        if state.lowlevel == LowLevelState.EMERGENCY and not self._emergency_seen:
            self._emergency_seen = True
            bus.publish_fault(
                "plant", f"emergency: {getattr(self.plant, 'emergency_reason', '?')}"
            )
        bus.publish("plant_state", state, writer="plant")

    def _task_imu(self) -> None:
        self.sched.bus.publish("imu", self.plant.sample_imu(), writer="plant")

    def _task_gnss(self) -> None:
        fix = self.plant.sample_gnss()
        if fix is not None:
            self.sched.bus.publish("gnss", fix, writer="plant")

    def _task_estimator(self) -> None:
        bus = self.sched.bus
        now = self.sched.clock.now
        imu_rec = bus.latest("imu")
        plant_rec = bus.latest("plant_state")
        if plant_rec is not None:
            self.eskf.set_road_wheel_angle(plant_rec.value.road_wheel_angle)
        if imu_rec is not None and self.eskf.initialized:
            self.eskf.predict(imu_rec.value, 0.008)
        fix_rec = bus.latest("gnss")
        if fix_rec is not None and fix_rec.value.stamp > self._last_fix_processed:
            self._last_fix_processed = fix_rec.value.stamp
            self.eskf.update_gnss(fix_rec.value)
        if self.eskf.initialized and self.raceline.banking is not None:
            s_star = getattr(self, "_last_s_star", None)
            if s_star is not None:
                from .planner import signed_cross_track

                ct = signed_cross_track(
                    self.raceline, (self.eskf.p[0], self.eskf.p[1]), s_star
                )
                self.eskf.correct_banking(float(self.raceline.bank(s_star)), ct)
        self.eskf.check_deadreckoning(now)
        if self.eskf.initialized:
            bus.publish("estimated_state", self.eskf.output(now), writer="estimator")

    def _localization_stale(self, now: float) -> bool:
        rec = self.sched.bus.latest("estimated_state")
        if rec is None:
            return True
        if now - rec.time > self.cfg.planner.localization_timeout:
            return True
        return rec.value.status == int(EstimatorStatus.FAILED)

    def _task_planner(self) -> None:
        bus = self.sched.bus
        now = self.sched.clock.now
        est_rec = bus.latest("estimated_state")
        if est_rec is None:
            return
        flags = self.flags
        verdict_rec = bus.latest("verdict")
        if (
            verdict_rec is not None
            and verdict_rec.value["action"] != int(SupervisorAction.NONE)
        ):
            flags = dataclasses.replace(flags, v_max_remote=0.0)
        path = self.planner.cycle(
            est_rec.value, flags, now, self._localization_stale(now)
        )
        self._last_s_star = path.s_star
        bus.publish("local_path", path, writer="planner")
        bus.publish(
            "tracking",
            {
                "stamp": now,
                "s_star": path.s_star,
                "cross_track": path.cross_track,
                "heading_error": path.heading_error,
                "v_cap": path.v_cap,
                "status": path.status,
            },
            writer="planner",
        )

    def _task_controller(self) -> None:
        bus = self.sched.bus
        now = self.sched.clock.now
        path_rec = bus.latest("local_path")
        est_rec = bus.latest("estimated_state")
        plant_rec = bus.latest("plant_state")
        if plant_rec is None:
            return
        plant_state = plant_rec.value
        v_car = (
            math.hypot(est_rec.value.velocity[0], est_rec.value.velocity[1])
            if est_rec
            else 0.0
        )
        out = self.controller.control_cycle(
            now=now,
            local_path=path_rec.value if path_rec else None,
            path_stamp=path_rec.time if path_rec else -1e9,
            localization_stale=self._localization_stale(now),
            v_car=v_car,
            rpm=plant_state.engine_rpm,
            gear=plant_state.gear,
            joystick=self.joystick,
        )
        self._counter = (self._counter + 1) & 0xFF
        cmd = ActuationCommand(
            throttle=out.throttle,
            brake=out.brake,
            steering=out.steering,
            gear=out.gear_cmd,
            rolling_counter=self._counter,
        )
        self._last_ctrl = out
        bus.publish("command", cmd, writer="controller")

    def _task_supervisor(self) -> None:
        bus = self.sched.bus
        now = self.sched.clock.now
        est_rec = bus.latest("estimated_state")
        path_rec = bus.latest("local_path")
        if est_rec is not None:
            self.supervisor.beat("estimator", est_rec.time)
        if path_rec is not None:
            self.supervisor.beat("planner", path_rec.time)
        tracking = bus.latest("tracking")
        cross = tracking.value["cross_track"] if tracking else None
        cmd_rec = bus.latest("command")
        plant_rec = bus.latest("plant_state")
        if cmd_rec is not None:
            self.supervisor.observe_command(cmd_rec.time, cmd_rec.value)
        plant_state = plant_rec.value if plant_rec else None
        # echo validation only makes sense while the plant obeys commands;
        # gear shifts cut the throttle internally, so suspend it then too
        echo_active = (
            plant_state is not None
            and plant_state.lowlevel == LowLevelState.DRIVING
            and (cmd_rec is None or cmd_rec.value.gear == plant_state.gear)
        )
        speed = plant_state.speed if plant_state else None
        verdict = self.supervisor.step(
            now,
            cross_track=cross,
            actuals=plant_state,
            speed=speed,
            echo_active=echo_active,
        )
        directives = self.supervisor.directives(speed=speed)
        if directives.plant_emergency:
            self.plant.set_emergency()
        elif directives.plant_supervised_stop:
            self.plant.set_supervised_stop()
        bus.publish(
            "verdict",
            {
                "stamp": now,
                "action": int(verdict.action),
                "cause": verdict.cause,
            },
            writer="supervisor",
        )

    def _task_dashboard_tx(self) -> None:
        bus = self.sched.bus
        frame = self.build_dashboard_frame()
        self.car_endpoint.send(encode_dashboard(frame))
        bus.publish("dashboard", frame, writer="telemetry")
        if self.bridge is not None:
            self.bridge.broadcast(frame)

    def _task_base_rx(self) -> None:
        bus = self.sched.bus
        now = self.sched.clock.now
        frames = self.base_rx.poll()
        if self.bridge is not None:
            for cmd in self.bridge.poll_commands():
                try:
                    from .telemetry import basestation_from_json

                    frames.append(basestation_from_json(json.dumps(cmd)))
                except (TypeError, ValueError, KeyError):
                    pass
        for frame in frames:
            self.flags = FlagState(
                veh_flag=VehFlag(frame.veh_flag)
                if frame.veh_flag in VehFlag._value2member_map_
                else VehFlag.NONE,
                track_flag=TrackFlag(frame.track_flag)
                if frame.track_flag in TrackFlag._value2member_map_
                else TrackFlag.GREEN,
                v_max_remote=frame.v_max,
                active_raceline=frame.raceline_index,
                last_remote_stamp=now,
            )
            self.joystick = JoystickState(
                override=frame.enable_joystick_control,
                steering=frame.steering_cmd,
                brake=frame.brake_amount,
                stamp=now,
            )
            if frame.enable_driving and self.plant.lowlevel == LowLevelState.ENGINE_ON:
                self.plant.enable_driving()
            bus.publish(
                "flags",
                {
                    "stamp": now,
                    "v_max": frame.v_max,
                    "track_flag": int(frame.track_flag),
                    "veh_flag": int(frame.veh_flag),
                    "raceline_index": int(frame.raceline_index),
                },
                writer="base_rx",
            )

    def _task_basestation(self) -> None:
        self.basestation.step(self.sched.clock.now)

    # ------------------------------------------------------------------

    def build_dashboard_frame(self) -> DashboardFrame:
        bus = self.sched.bus
        now = self.sched.clock.now
        sec, nsec = split_stamp(now)
        plant_rec = bus.latest("plant_state")
        est_rec = bus.latest("estimated_state")
        cmd_rec = bus.latest("command")
        tracking = bus.latest("tracking")
        ctrl = getattr(self, "_last_ctrl", None)

        plant = plant_rec.value if plant_rec else None
        est = est_rec.value if est_rec else None
        cmd = cmd_rec.value if cmd_rec else None
        trk = tracking.value if tracking else None

        actual_speed = math.hypot(est.velocity[0], est.velocity[1]) if est else 0.0
        target_v = ctrl.target_velocity if ctrl else 0.0
        return DashboardFrame(
            stamp_sec=sec,
            stamp_nsec=nsec,
            cmd_gear=int(cmd.gear) if cmd else 1,
            actual_gear=int(plant.gear) if plant else 1,
            cmd_throttle=int(round(cmd.throttle)) if cmd else 0,
            actual_throttle=int(round(plant.throttle_actual)) if plant else 0,
            cmd_brake=int(round(cmd.brake)) if cmd else 0,
            actual_brake_front=int(round(plant.brake_front)) if plant else 0,
            actual_brake_rear=int(round(plant.brake_rear)) if plant else 0,
            cmd_steering_degree=int(round(cmd.steering)) if cmd else 0,
            actual_steering_degree=int(round(plant.steering_actual_deg)) if plant else 0,
            heading_error=float(trk["heading_error"]) if trk else 0.0,
            cross_track_error=float(trk["cross_track"]) if trk else 0.0,
            velocity_error=float(target_v - actual_speed),
            target_velocity_mps=float(target_v),
            actual_velocity_mps=float(actual_speed),
            purepursuit_lookahead_distance=float(ctrl.lookahead_distance) if ctrl else 0.0,
            purepursuit_lookahead_angle_rad=float(ctrl.lookahead_angle) if ctrl else 0.0,
            position_x=float(est.position[0]) if est else 0.0,
            position_y=float(est.position[1]) if est else 0.0,
            position_z=float(est.position[2]) if est else 0.0,
            position_r=float(est.rpy[0]) if est else 0.0,
            position_p=float(est.rpy[1]) if est else 0.0,
            position_yaw=float(est.rpy[2]) if est else 0.0,
            velocity_x=float(est.velocity[0]) if est else 0.0,
            velocity_y=float(est.velocity[1]) if est else 0.0,
            velocity_z=float(est.velocity[2]) if est else 0.0,
            trust=float(est.trust) if est else 0.0,
            status=int(est.status) if est else 0,
            engine_speed_rpm=float(plant.engine_rpm) if plant else 0.0,
            vehicle_speed_kmph=float(actual_speed * 3.6),
        )

    def advance(self, until_s: float):
        return self.sched.advance(until_s)

    def run(self, duration: float | None = None) -> None:
        self.sched.advance_by(duration if duration is not None else self.cfg.duration_s)

    def close(self) -> None:
        if self.log is not None:
            self.log.close()

    @property
    def emergency_occurred(self) -> bool:
        return self._emergency_seen
