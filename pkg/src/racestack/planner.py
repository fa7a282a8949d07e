"""Online local planner.

Locates the vehicle on the active raceline spline with Newton's method
(warm-started from the previous cycle), integrates a fixed-horizon,
time-parameterized path forward along the spline, applies velocity caps from
remote commands and race flags (with timeout-to-stop semantics), and
transforms the result into the vehicle frame for the controller.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .geometry import wrap_angle
from .track import Raceline

MPH_80_IN_MPS = 80.0 * 0.44704  # yellow-flag cap


class TrackFlag(IntEnum):
    GREEN = 0
    YELLOW = 1
    RED = 2


class VehFlag(IntEnum):
    NONE = 0
    START_ENGINE = 1
    PIT = 2
    STOP = 3


class PathStatus(IntEnum):
    NOMINAL = 0
    STOPPING = 1
    FALLBACK_SEARCH = 2


@dataclass(frozen=True)
class PlannerConfig:
    rate_hz: float = 50.0
    path_step: float = 0.05
    path_duration: float = 2.5
    localization_timeout: float = 0.2
    remote_timeout: float = 5.0
    stop_decel: float = 10.0  # ramp-down for cap-zero paths
    pit_speed: float = 20.0
    raceline_switch_crosstrack: float = 2.0

    @property
    def n_points(self) -> int:
        n = self.path_duration / self.path_step
        if abs(n - round(n)) > 1e-9:
            raise ValueError("path_duration must be an integer multiple of path_step")
        return int(round(n))


@dataclass
class FlagState:
    veh_flag: VehFlag = VehFlag.NONE
    track_flag: TrackFlag = TrackFlag.GREEN
    v_max_remote: float = 0.0
    active_raceline: int = 0
    last_remote_stamp: float = -1e9


@dataclass(frozen=True)
class LocalPath:
    """Time-parameterized path in the vehicle frame.

    points columns: x, y, heading, v, t.  points[0] is the projection of the
    vehicle onto the raceline at t = 0; the controller's reference index 2 is
    therefore two steps ahead of the projection.
    """

    stamp: float
    points: np.ndarray
    status: int
    s_star: float
    cross_track: float
    heading_error: float
    v_cap: float


class NewtonNoConvergence(Exception):
    pass


def nearest_point(
    raceline: Raceline, pose_xy, s_warm: float, max_iter: int = 20
) -> float:
    """Arc length of a local minimum of squared distance to the spline,
    found by damped Newton iteration from the warm start."""
    p = np.asarray(pose_xy, dtype=float)
    s = raceline.wrap_s(float(s_warm))
    max_step = 50.0
    for _ in range(max_iter):
        pt, d1, d2 = raceline.derivatives(s)
        diff = pt - p
        dist_sq = float(diff @ diff)
        grad = 2.0 * float(diff @ d1)
        hess = 2.0 * float(d1 @ d1 + diff @ d2)
        if abs(grad) < 1e-8 * (1.0 + dist_sq):
            return float(raceline.wrap_s(s))
        if hess <= 1e-12:
            step = -math.copysign(max_step, grad)
        else:
            step = -grad / hess
        step = min(max(step, -max_step), max_step)
        s = raceline.wrap_s(s + step)
    pt, d1, _ = raceline.derivatives(s)
    diff = pt - p
    if abs(2.0 * float(diff @ d1)) < 1e-6 * (1.0 + float(diff @ diff)):
        return float(raceline.wrap_s(s))
    raise NewtonNoConvergence(f"no convergence near s={s:.2f}")


def nearest_point_batch(
    raceline: Raceline, points: np.ndarray, s_init: np.ndarray, max_iter: int = 30
) -> np.ndarray:
    """Vectorized damped Newton over many (point, warm start) pairs at once;
    used by post-run analysis where the series has tens of thousands of
    poses."""
    pts = np.asarray(points, dtype=float)
    s = raceline.wrap_s(np.asarray(s_init, dtype=float).copy())
    for _ in range(max_iter):
        x, y, dx, dy, ddx, ddy = raceline.eval_all(s)
        rx, ry = x - pts[:, 0], y - pts[:, 1]
        grad = 2.0 * (rx * dx + ry * dy)
        hess = 2.0 * (dx * dx + dy * dy + rx * ddx + ry * ddy)
        step = np.where(
            hess > 1e-12, -grad / np.where(hess > 1e-12, hess, 1.0), -np.sign(grad) * 50.0
        )
        step = np.clip(step, -50.0, 50.0)
        s = raceline.wrap_s(s + step)
        if np.abs(step).max() < 1e-10:
            break
    return s


def grid_fallback(raceline: Raceline, pose_xy, s_warm: float, window: float = 200.0) -> float:
    """Coarse grid search around the warm start, refined by one Newton run."""
    p = np.asarray(pose_xy, dtype=float)
    candidates = raceline.wrap_s(s_warm + np.arange(-window, window, 1.0))
    pts = raceline.position(candidates)
    best = candidates[int(np.argmin(np.sum((pts - p) ** 2, axis=1)))]
    try:
        return nearest_point(raceline, pose_xy, float(best))
    except NewtonNoConvergence:
        return float(best)


def signed_cross_track(raceline: Raceline, pose_xy, s: float) -> float:
    """Signed lateral offset of the pose from the spline point at s;
    positive means the vehicle is left of the raceline."""
    pt, d1, _ = raceline.derivatives(s)
    tangent = d1 / max(np.linalg.norm(d1), 1e-12)
    diff = np.asarray(pose_xy, dtype=float) - pt
    return float(tangent[0] * diff[1] - tangent[1] * diff[0])


def resolve_caps(
    flags: FlagState,
    now: float,
    cfg: PlannerConfig,
    localization_stale: bool = False,
) -> float:
    """Effective speed cap from remote command and race flags; remote or
    localization staleness forces a full stop."""
    if now - flags.last_remote_stamp > cfg.remote_timeout:
        return 0.0
    if localization_stale:
        return 0.0
    cap = max(flags.v_max_remote, 0.0)
    if flags.track_flag == TrackFlag.YELLOW:
        cap = min(cap, MPH_80_IN_MPS)
    elif flags.track_flag == TrackFlag.RED:
        cap = 0.0
    if flags.veh_flag == VehFlag.STOP:
        cap = 0.0
    elif flags.veh_flag == VehFlag.PIT:
        cap = min(cap, cfg.pit_speed)
    return cap


def build_path(
    raceline: Raceline,
    s_star: float,
    v_cap: float,
    v_current: float,
    cfg: PlannerConfig,
) -> tuple[np.ndarray, int]:
    """Integrate the raceline forward from s_star: n_points + 1 rows of
    (x, y, heading, v, t) in the global frame.  A zero cap produces a
    constant-deceleration ramp along the raceline instead."""
    n = cfg.n_points + 1
    s_vals = np.empty(n)
    v_vals = np.empty(n)
    stopping = v_cap <= 1e-9
    s = float(s_star)
    v_prev = max(v_current, 0.0)
    for k in range(n):
        if stopping:
            v_k = max(0.0, v_prev - cfg.stop_decel * cfg.path_step) if k else v_prev
            v_prev = v_k
        else:
            v_k = min(float(raceline.v_ref(s)), v_cap)
        s_vals[k] = s
        v_vals[k] = v_k
        s = s + v_k * cfg.path_step
    x, y, heading, _, _, _ = raceline.eval(s_vals)
    t_vals = np.arange(n) * cfg.path_step
    pts = np.column_stack([x, y, heading, v_vals, t_vals])
    return pts, PathStatus.STOPPING if stopping else PathStatus.NOMINAL


def global_to_local(points: np.ndarray, pose) -> np.ndarray:
    """Rigid transform of path rows into the vehicle frame (rotate by -yaw,
    translate); headings become relative, v and t are untouched."""
    x0, y0, yaw = pose
    c, s = math.cos(yaw), math.sin(yaw)
    out = points.copy()
    dx = points[:, 0] - x0
    dy = points[:, 1] - y0
    out[:, 0] = c * dx + s * dy
    out[:, 1] = -s * dx + c * dy
    out[:, 2] = np.array([wrap_angle(h - yaw) for h in points[:, 2]])
    return out


class Planner:
    """Stateful per-cycle planner: warm-started nearest point, cap
    resolution, path construction and local-frame transform."""

    def __init__(
        self,
        racelines: list[Raceline],
        cfg: PlannerConfig | None = None,
    ):
        if not racelines:
            raise ValueError("at least one raceline required")
        self.racelines = racelines
        self.cfg = cfg or PlannerConfig()
        self.active = 0
        self._s_warm = 0.0
        self._warm_valid = False
        self.fallback_count = 0

    @property
    def raceline(self) -> Raceline:
        return self.racelines[self.active]

    def _maybe_switch(self, requested: int, pose_xy) -> None:
        if requested == self.active or not (0 <= requested < len(self.racelines)):
            return
        target = self.racelines[requested]
        s_new = grid_fallback(target, pose_xy, self._s_warm, window=250.0)
        if abs(signed_cross_track(target, pose_xy, s_new)) < self.cfg.raceline_switch_crosstrack:
            self.active = requested
            self._s_warm = s_new

    def cycle(
        self,
        est,
        flags: FlagState,
        now: float,
        localization_stale: bool = False,
    ) -> LocalPath:
        pose_xy = (est.position[0], est.position[1])
        yaw = est.rpy[2]
        self._maybe_switch(flags.active_raceline, pose_xy)

        status_extra = 0
        if not self._warm_valid:
            self._s_warm = grid_fallback(
                self.raceline, pose_xy, 0.0, window=self.raceline.total_length / 2
            )
            self._warm_valid = True
        try:
            s_star = nearest_point(self.raceline, pose_xy, self._s_warm)
        except NewtonNoConvergence:
            s_star = grid_fallback(self.raceline, pose_xy, self._s_warm)
            self.fallback_count += 1
            status_extra = PathStatus.FALLBACK_SEARCH
        self._s_warm = s_star

        v_cap = resolve_caps(flags, now, self.cfg, localization_stale)
        v_current = math.hypot(est.velocity[0], est.velocity[1])
        pts_global, status = build_path(
            self.raceline, s_star, v_cap, v_current, self.cfg
        )
        pts_local = global_to_local(pts_global, (pose_xy[0], pose_xy[1], yaw))

        cross = signed_cross_track(self.raceline, pose_xy, s_star)
        head_err = wrap_angle(yaw - float(self.raceline.heading(s_star)))
        return LocalPath(
            stamp=now,
            points=pts_local,
            status=int(status if not status_extra else status_extra),
            s_star=s_star,
            cross_track=cross,
            heading_error=head_err,
            v_cap=v_cap,
        )
