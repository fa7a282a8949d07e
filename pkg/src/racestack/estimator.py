"""Error-state Kalman filter localization.

IMU-driven prediction (gyro for attitude, coordinated-turn velocity carry),
RTK position/heading updates guarded by a reliability gate (reported
variance, RTK status, motion prior) and softened by an inverse-multiquadric
robust weight, horizontal velocity observed by differencing consecutive
accepted fixes, dead-reckoning timeouts with velocity-scaled re-initialization,
and track banking fused as a roll pseudo-measurement.

Error state ordering: [position(3), velocity(3), rpy(3), gyro bias(3)].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .geometry import euler_rate_matrix, wrap_angle
from .vehicle import GnssFix, ImuSample, RtkStatus


class EstimatorStatus(IntEnum):
    OK = 0
    DEAD_RECKONING = 1
    REINITIALIZING = 2
    FAILED = 3


@dataclass(frozen=True)
class EskfConfig:
    # measurement noise (used when the fix itself reports nothing better)
    heading_sigma: float = math.radians(0.2)
    velocity_obs_floor: float = 0.02  # m/s, added to differenced-fix velocity noise
    # fix differencing reuses noise the state already absorbed one update ago,
    # which a memoryless filter cannot model; inflating the velocity row keeps
    # that feedback loop weak (variance multiplier)
    velocity_obs_inflation: float = 9.0
    z_deweight: float = 4.0  # extra multiplier on reported vertical variance
    # process noise densities
    velocity_random_walk: float = 0.25  # m/s per sqrt(s): unmodeled accel
    gyro_noise: float = 0.005  # rad/s/sqrt(Hz)
    gyro_bias_walk: float = 1e-4
    # gating
    variance_gate_fixed: float = 0.05**2  # max accepted reported xy variance
    variance_gate_float: float = 1.0**2
    jump_speed_factor: float = 2.0  # motion prior: |dp| <= factor*v*dt + slack
    jump_slack: float = 0.5  # m
    fix_interval_nominal: float = 0.05  # s, sets the re-init jump bound scale
    # robust weighting; robust=False bypasses gates and IMQ (baseline filter
    # for paired-comparison experiments)
    imq_c: float = 3.0
    robust: bool = True
    # dead reckoning
    t_deadreckon: float = 0.5
    t_reinit: float = 2.0
    # banking observation
    bank_sigma: float = math.radians(0.5)
    bank_lane_bound: float = 6.0  # m cross-track gate
    # vehicle geometry for slip-angle output
    wheelbase: float = 2.9718
    l_f: float = 1.30
    # trust bookkeeping
    gate_window: int = 20


@dataclass(frozen=True)
class GateReport:
    variance_ok: bool
    rtk_ok: bool
    motion_prior_ok: bool
    mahalanobis: float
    imq_weight: float

    @property
    def accepted(self) -> bool:
        return self.variance_ok and self.rtk_ok and self.motion_prior_ok


@dataclass(frozen=True)
class EstimatedState:
    stamp: float
    position: tuple[float, float, float]
    rpy: tuple[float, float, float]
    velocity: tuple[float, float, float]  # body frame
    angular_velocity: tuple[float, float, float]
    slip_angle_front: float
    slip_angle_rear: float
    trust: float
    status: int


def imq_weight(mahalanobis_sq: float, c: float) -> float:
    """Inverse-multiquadric robust weight in (0, 1]; 1 at zero residual."""
    if c <= 0:
        raise ValueError("imq c must be positive")
    return 1.0 / math.sqrt(1.0 + mahalanobis_sq / (c * c))


class UpdateSkipped(Exception):
    """Singular innovation covariance; the update was dropped."""


class Eskf:
    N = 12

    def __init__(self, config: EskfConfig | None = None):
        self.cfg = config or EskfConfig()
        self.p = np.zeros(3)
        self.v = np.zeros(3)  # world (ENU) frame
        self.rpy = np.zeros(3)
        self.gyro_bias = np.zeros(3)
        self.P = np.diag(
            [25.0, 25.0, 25.0, 9.0, 9.0, 9.0, 0.05, 0.05, 0.5, 1e-4, 1e-4, 1e-4]
        )
        self.mode = EstimatorStatus.OK
        self.failed = False
        self.last_fix_time = 0.0
        self.initialized = False
        self._last_gyro = np.zeros(3)
        self._prev_fix: GnssFix | None = None
        self._gate_history: list[bool] = []
        self._road_wheel = 0.0
        self.time = 0.0

    # ------------------------------------------------------------------

    def set_road_wheel_angle(self, delta: float) -> None:
        self._road_wheel = delta

    def initialize_from_fix(self, fix: GnssFix) -> None:
        self.p = np.array([fix.x, fix.y, fix.z])
        self.v = np.zeros(3)
        self.rpy = np.array([0.0, 0.0, fix.heading])
        self.P = np.zeros((self.N, self.N))
        self.P[:3, :3] = np.diag([v + 1e-12 for v in fix.variance])
        # velocity is genuinely unknown at (re)initialization: the vehicle
        # may be at race speed, and an overconfident zero would make the
        # motion-prior gate reject every subsequent honest fix
        self.P[3:6, 3:6] = np.diag([60.0**2, 60.0**2, 5.0**2])
        self.P[6:9, 6:9] = np.diag([0.05, 0.05, self.cfg.heading_sigma**2 + 1e-12])
        self.P[9:12, 9:12] = np.eye(3) * 1e-4
        self.last_fix_time = fix.stamp
        self.time = fix.stamp
        self._prev_fix = fix
        self.initialized = True
        self.mode = EstimatorStatus.OK

    def _symmetrize(self) -> None:
        self.P = 0.5 * (self.P + self.P.T)

    # ------------------------------------------------------------------
    # Prediction

    def predict(self, imu: ImuSample, dt: float) -> None:
        if not (0.0 < dt <= 0.02):
            raise ValueError("predict dt must be in (0, 0.02] s")
        gyro = np.asarray(imu.gyro, dtype=float)
        if not np.all(np.isfinite(gyro)) or not np.all(np.isfinite(imu.accel)):
            raise ValueError("non-finite IMU sample")
        self.time = imu.stamp
        omega = gyro - self.gyro_bias
        self._last_gyro = omega

        e_mat = euler_rate_matrix(self.rpy[0], self.rpy[1])
        rpy_rate = e_mat @ omega
        dpsi = rpy_rate[2] * dt

        # coordinated-turn carry: the horizontal velocity vector turns with
        # the vehicle between fixes (RTK supplies speed, the gyro supplies
        # direction changes); accelerometer data is too vibration-corrupted
        # to integrate
        c, s = math.cos(dpsi), math.sin(dpsi)
        rot_z = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

        self.p = self.p + self.v * dt
        self.v = rot_z @ self.v
        self.rpy = self.rpy + rpy_rate * dt
        self.rpy[0] = wrap_angle(self.rpy[0])
        self.rpy[1] = wrap_angle(self.rpy[1])
        self.rpy[2] = wrap_angle(self.rpy[2])

        f_mat = np.eye(self.N)
        f_mat[0:3, 3:6] = np.eye(3) * dt
        f_mat[3:6, 3:6] = rot_z
        f_mat[6:9, 9:12] = -e_mat * dt

        cfg = self.cfg
        q = np.zeros((self.N, self.N))
        q[3:6, 3:6] = np.eye(3) * (cfg.velocity_random_walk**2 * dt)
        q[6:9, 6:9] = np.eye(3) * (cfg.gyro_noise**2 * dt)
        q[9:12, 9:12] = np.eye(3) * (cfg.gyro_bias_walk**2 * dt)

        self.P = f_mat @ self.P @ f_mat.T + q
        self._symmetrize()

    # ------------------------------------------------------------------
    # Gating

    def _jump_bound(self, dt: float) -> float:
        speed = float(np.linalg.norm(self.v[:2]))
        return self.cfg.jump_speed_factor * speed * dt + self.cfg.jump_slack

    def gate(self, fix: GnssFix) -> GateReport:
        cfg = self.cfg
        var_xy = max(fix.variance[0], fix.variance[1])
        if fix.rtk_status == RtkStatus.RTK_FIXED:
            variance_ok = var_xy <= cfg.variance_gate_fixed
        elif fix.rtk_status == RtkStatus.RTK_FLOAT:
            variance_ok = var_xy <= cfg.variance_gate_float
        else:
            variance_ok = False
        rtk_ok = fix.rtk_status in (RtkStatus.RTK_FIXED, RtkStatus.RTK_FLOAT)

        dt = max(fix.stamp - self.last_fix_time, 1e-3)
        pos_pred, _ = self._predicted_at_fix_time(fix.stamp)
        jump = float(np.linalg.norm(np.array([fix.x, fix.y]) - pos_pred[:2]))
        # own position uncertainty widens the prior, so an honest fix can
        # still pull in a filter that starts (or drifts) off target
        p_slack = 3.0 * math.sqrt(max(self.P[0, 0], self.P[1, 1], 0.0))
        motion_prior_ok = jump <= self._jump_bound(dt) + p_slack

        innov, s_mat, _, _ = self._position_heading_innovation(fix)
        try:
            m2 = float(innov @ np.linalg.solve(s_mat, innov))
        except np.linalg.LinAlgError:
            m2 = float("inf")
        # normalize per degree of freedom: a 4-dim innovation at its nominal
        # chi-square level would otherwise sit near c and chronically starve
        # honest updates
        m2 = max(m2, 0.0) / len(innov)
        return GateReport(
            variance_ok=variance_ok,
            rtk_ok=rtk_ok,
            motion_prior_ok=motion_prior_ok,
            mahalanobis=math.sqrt(m2),
            imq_weight=imq_weight(m2, cfg.imq_c),
        )

    def _predicted_at_fix_time(self, stamp: float):
        """First-order back-propagation of position/yaw to the measurement
        stamp; fixes arrive up to one estimator tick late and at race speed
        that lag is a real along-track bias."""
        lag = min(max(self.time - stamp, 0.0), 0.05)
        pos = self.p - self.v * lag
        yaw = wrap_angle(self.rpy[2] - float(self._last_gyro[2]) * lag)
        return pos, yaw

    def _position_heading_innovation(self, fix: GnssFix):
        h_mat = np.zeros((4, self.N))
        h_mat[0:3, 0:3] = np.eye(3)
        h_mat[3, 8] = 1.0
        r_diag = np.array(
            [
                fix.variance[0] + 1e-12,
                fix.variance[1] + 1e-12,
                fix.variance[2] * self.cfg.z_deweight + 1e-12,
                self.cfg.heading_sigma**2 + 1e-12,
            ]
        )
        pos_pred, yaw_pred = self._predicted_at_fix_time(fix.stamp)
        innov = np.array(
            [
                fix.x - pos_pred[0],
                fix.y - pos_pred[1],
                fix.z - pos_pred[2],
                wrap_angle(fix.heading - yaw_pred),
            ]
        )
        s_mat = h_mat @ self.P @ h_mat.T + np.diag(r_diag)
        return innov, s_mat, h_mat, r_diag

    # ------------------------------------------------------------------
    # Updates

    def _apply_update(self, innov, h_mat, r_mat, weight: float) -> None:
        """Joseph-form Kalman update with IMQ-inflated measurement noise."""
        r_mat = np.asarray(r_mat, dtype=float)
        if r_mat.ndim == 1:
            r_mat = np.diag(r_mat)
        r_infl = r_mat / (weight * weight)
        s_mat = h_mat @ self.P @ h_mat.T + r_infl
        try:
            k_gain = np.linalg.solve(s_mat.T, (self.P @ h_mat.T).T).T
        except np.linalg.LinAlgError as exc:
            raise UpdateSkipped(f"singular innovation covariance: {exc}") from exc
        delta = k_gain @ innov
        self.p = self.p + delta[0:3]
        self.v = self.v + delta[3:6]
        self.rpy = self.rpy + delta[6:9]
        for i in range(3):
            self.rpy[i] = wrap_angle(self.rpy[i])
        self.gyro_bias = self.gyro_bias + delta[9:12]
        ikh = np.eye(self.N) - k_gain @ h_mat
        self.P = ikh @ self.P @ ikh.T + k_gain @ r_infl @ k_gain.T
        self._symmetrize()

    def update_gnss(self, fix: GnssFix) -> GateReport:
        """Gate, robust-weight, and fuse one fix; returns the gate report.

        A rejected fix changes nothing.  In REINIT mode an otherwise clean
        fix re-seeds the filter if the implied jump is inside the
        velocity-scaled bound, otherwise the filter latches FAILED.
        """
        if not self.initialized:
            self.initialize_from_fix(fix)
            return GateReport(True, True, True, 0.0, 1.0)

        report = self.gate(fix)
        if self.failed:
            return report
        if not self.cfg.robust:
            report = GateReport(True, True, True, report.mahalanobis, 1.0)

        if self.mode == EstimatorStatus.REINITIALIZING:
            if report.variance_ok and report.rtk_ok:
                jump = float(
                    np.linalg.norm(np.array([fix.x, fix.y]) - self.p[:2])
                )
                # hard safety bound: scaled by speed and one nominal fix
                # interval, never widened by the (large) coasted covariance
                if jump <= self._jump_bound(self.cfg.fix_interval_nominal):
                    self.initialize_from_fix(fix)
                    self._record_gate(True)
                else:
                    self.failed = True
                    self.mode = EstimatorStatus.FAILED
                    self._record_gate(False)
            return report

        self._record_gate(report.accepted)
        if not report.accepted:
            return report

        innov, _, h_mat, r_diag = self._position_heading_innovation(fix)

        # horizontal velocity observed by differencing consecutive accepted
        # fixes.  The differenced observation shares the current fix's noise
        # with the position rows, so the joint measurement covariance carries
        # the cross terms; treating them as independent double-counts the fix
        # noise and makes the filter overconfident.
        prev = self._prev_fix
        use_vel = prev is not None and 1e-3 < fix.stamp - prev.stamp <= 0.5
        if use_vel:
            dt = fix.stamp - prev.stamp
            v_obs = np.array([(fix.x - prev.x) / dt, (fix.y - prev.y) / dt])
            h_joint = np.zeros((6, self.N))
            h_joint[0:4] = h_mat
            h_joint[4, 3] = 1.0
            h_joint[5, 4] = 1.0
            innov_j = np.concatenate([innov, v_obs - self.v[:2]])
            r_joint = np.zeros((6, 6))
            r_joint[:4, :4] = np.diag(r_diag)
            for axis in range(2):
                var_cur = fix.variance[axis]
                var_prev = prev.variance[axis]
                vel_row = 4 + axis
                r_joint[vel_row, vel_row] = (
                    (var_cur + var_prev) / dt**2 + self.cfg.velocity_obs_floor**2
                ) * self.cfg.velocity_obs_inflation
                r_joint[axis, vel_row] = r_joint[vel_row, axis] = var_cur / dt
            try:
                self._apply_update(innov_j, h_joint, r_joint, report.imq_weight)
            except UpdateSkipped:
                return report
        else:
            try:
                self._apply_update(innov, h_mat, np.diag(r_diag), report.imq_weight)
            except UpdateSkipped:
                return report

        self.last_fix_time = fix.stamp
        self._prev_fix = fix
        self.mode = EstimatorStatus.OK
        return report

    def correct_banking(
        self, bank: float, cross_track: float, grade: float = 0.0
    ) -> bool:
        """Fuse the track roll angle as a pseudo-measurement of vehicle roll
        (and the road grade as one of pitch); no-op when the vehicle is not
        localized near the raceline.

        Pinning pitch matters: with any roll error the Euler kinematics bleed
        yaw rate into pitch at sin(roll_err) * yaw_rate, and unobserved pitch
        error feeds back into the roll and yaw rates, which on a long corner
        winds up the whole attitude."""
        if self.failed or not self.initialized:
            return False
        if abs(cross_track) > self.cfg.bank_lane_bound:
            return False
        h_mat = np.zeros((2, self.N))
        h_mat[0, 6] = 1.0
        h_mat[1, 7] = 1.0
        innov = np.array(
            [wrap_angle(bank - self.rpy[0]), wrap_angle(grade - self.rpy[1])]
        )
        try:
            self._apply_update(
                innov,
                h_mat,
                np.array([self.cfg.bank_sigma**2, self.cfg.bank_sigma**2]),
                1.0,
            )
        except UpdateSkipped:
            return False
        return True

    # ------------------------------------------------------------------
    # Dead reckoning / trust

    def check_deadreckoning(self, now: float) -> EstimatorStatus:
        if self.failed:
            self.mode = EstimatorStatus.FAILED
            return self.mode
        if not self.initialized:
            return self.mode
        gap = now - self.last_fix_time
        if gap > self.cfg.t_reinit:
            self.mode = EstimatorStatus.REINITIALIZING
        elif gap > self.cfg.t_deadreckon:
            self.mode = EstimatorStatus.DEAD_RECKONING
        else:
            if self.mode != EstimatorStatus.OK:
                self.mode = EstimatorStatus.OK
        return self.mode

    def _record_gate(self, ok: bool) -> None:
        self._gate_history.append(ok)
        if len(self._gate_history) > self.cfg.gate_window:
            self._gate_history.pop(0)

    def trust(self, now: float) -> float:
        if self.failed:
            return 0.0
        pass_rate = (
            sum(self._gate_history) / len(self._gate_history)
            if self._gate_history
            else 1.0
        )
        gap = now - self.last_fix_time
        if gap <= self.cfg.t_deadreckon:
            decay = 1.0
        elif gap >= self.cfg.t_reinit:
            decay = 0.0
        else:
            decay = 1.0 - (gap - self.cfg.t_deadreckon) / (
                self.cfg.t_reinit - self.cfg.t_deadreckon
            )
        return pass_rate * decay

    # ------------------------------------------------------------------

    def output(self, now: float) -> EstimatedState:
        cfg = self.cfg
        cy, sy = math.cos(self.rpy[2]), math.sin(self.rpy[2])
        v_bx = cy * self.v[0] + sy * self.v[1]
        v_by = -sy * self.v[0] + cy * self.v[1]
        omega_z = float(self._last_gyro[2])
        if v_bx > 1.0:
            slip_f = self._road_wheel - math.atan2(v_by + cfg.l_f * omega_z, v_bx)
            slip_r = -math.atan2(v_by - (cfg.wheelbase - cfg.l_f) * omega_z, v_bx)
        else:
            slip_f = slip_r = 0.0
        return EstimatedState(
            stamp=now,
            position=tuple(float(x) for x in self.p),
            rpy=tuple(float(x) for x in self.rpy),
            velocity=(float(v_bx), float(v_by), float(self.v[2])),
            angular_velocity=tuple(float(x) for x in self._last_gyro),
            slip_angle_front=float(slip_f),
            slip_angle_rear=float(slip_r),
            trust=float(self.trust(now)),
            status=int(self.check_deadreckoning(now)),
        )
