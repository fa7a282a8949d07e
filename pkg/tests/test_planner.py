"""Newton nearest point, path construction, cap resolution, frame transform."""
from __future__ import annotations

import math

import numpy as np
import pytest

from racestack import track
from racestack.estimator import EstimatedState
from racestack.planner import (
    MPH_80_IN_MPS,
    FlagState,
    Planner,
    PlannerConfig,
    TrackFlag,
    VehFlag,
    build_path,
    global_to_local,
    grid_fallback,
    nearest_point,
    resolve_caps,
    signed_cross_track,
)


def straight_raceline(length=400.0, v=50.0):
    x = np.linspace(0.0, length, 120)
    return track.fit_quintic_spline(
        np.column_stack([x, np.zeros_like(x), np.full_like(x, v)]), closed=False
    )


def circle_raceline(r=49.0, v=29.7):
    th = np.linspace(0, 2 * np.pi, 160, endpoint=False)
    return track.fit_quintic_spline(
        np.column_stack([r * np.cos(th), r * np.sin(th), np.full_like(th, v)]),
        closed=True,
    )


def make_est(x, y, yaw=0.0, vx=40.0):
    return EstimatedState(
        stamp=0.0,
        position=(x, y, 0.0),
        rpy=(0.0, 0.0, yaw),
        velocity=(vx, 0.0, 0.0),
        angular_velocity=(0.0, 0.0, 0.0),
        slip_angle_front=0.0,
        slip_angle_rear=0.0,
        trust=1.0,
        status=0,
    )


def fresh_flags(now=0.0, v_max=60.0, **kw):
    return FlagState(v_max_remote=v_max, last_remote_stamp=now, **kw)


# ---------------------------------------------------------------------------
# nearest point


def test_nearest_point_orthogonal_projection_on_straight():
    rl = straight_raceline()
    s = nearest_point(rl, (5.3, 2.0), s_warm=3.0)
    assert s == pytest.approx(5.3, abs=1e-6)


def test_nearest_point_radial_projection_on_circle():
    rl = circle_raceline(49.0)
    theta = 0.7
    pose = (51.0 * math.cos(theta), 51.0 * math.sin(theta))
    s = nearest_point(rl, pose, s_warm=49.0 * theta - 5.0)
    assert s == pytest.approx(49.0 * theta, abs=1e-3)


def test_nearest_point_tie_broken_by_warm_start():
    # hairpin: two parallel legs 20 m apart; a pose on the symmetry axis is
    # equidistant from both, so the warm start picks the lobe
    leg = np.linspace(0.0, 150.0, 76)
    up = np.column_stack([leg, np.full_like(leg, 10.0)])
    phis = np.linspace(np.pi / 2, -np.pi / 2, 16)[1:-1]
    turn = np.column_stack([150.0 + 10.0 * np.cos(phis), 10.0 * np.sin(phis)])
    down = np.column_stack([leg[::-1], np.full_like(leg, -10.0)])
    rl = track.fit_quintic_spline(np.vstack([up, turn, down]), closed=False)
    pose = (40.0, 0.0)
    s_low = nearest_point(rl, pose, s_warm=30.0)
    s_high = nearest_point(rl, pose, s_warm=rl.total_length - 100.0)
    assert s_low == pytest.approx(40.0, abs=0.1)
    assert s_high == pytest.approx(rl.total_length - 40.0, abs=0.3)
    assert s_low < rl.total_length / 3 and s_high > 2 * rl.total_length / 3


def test_newton_matches_centimeter_grid_on_1000_random_poses():
    rng = np.random.default_rng(4)
    for rl, sample_pose in (
        (
            circle_raceline(49.0),
            lambda: (
                (lambda th, r: (np.array([r * math.cos(th), r * math.sin(th)]), 49.0 * th))(
                    rng.uniform(0, 2 * math.pi), rng.uniform(40.0, 58.0)
                )
            ),
        ),
        (
            straight_raceline(400.0),
            lambda: (
                np.array([rng.uniform(5.0, 395.0), rng.uniform(-6.0, 6.0)]),
                rng.uniform(5.0, 395.0),
            ),
        ),
    ):
        grid = np.arange(0.0, rl.total_length, 0.01)
        pts = rl.position(grid)
        for _ in range(1000):
            pose, s_true_hint = sample_pose()
            warm = rl.wrap_s(s_true_hint + rng.uniform(-30, 30))
            s_newton = nearest_point(rl, pose, warm)
            d2 = (pts[:, 0] - pose[0]) ** 2 + (pts[:, 1] - pose[1]) ** 2
            s_grid = grid[int(np.argmin(d2))]
            diff = abs(s_newton - s_grid)
            if rl.closed:
                diff = min(diff, rl.total_length - diff)
            assert diff <= 0.011


def test_grid_fallback_recovers_without_warm_start():
    rl = circle_raceline(49.0)
    s = grid_fallback(rl, (49.0, 0.5), s_warm=150.0, window=200.0)
    assert rl.wrap_s(s) == pytest.approx(0.5, abs=0.02)


# ---------------------------------------------------------------------------
# caps


def test_caps_green_flag_passes_remote():
    cfg = PlannerConfig()
    assert resolve_caps(fresh_flags(v_max=60.0), 0.0, cfg) == 60.0


def test_caps_yellow_flag_limits_to_80mph():
    cfg = PlannerConfig()
    flags = fresh_flags(v_max=60.0, track_flag=TrackFlag.YELLOW)
    assert resolve_caps(flags, 0.0, cfg) == pytest.approx(MPH_80_IN_MPS)
    assert MPH_80_IN_MPS == pytest.approx(35.7632)


def test_caps_remote_stale_forces_stop():
    cfg = PlannerConfig()
    flags = fresh_flags(v_max=60.0)
    assert resolve_caps(flags, 6.0, cfg) == 0.0


def test_caps_localization_stale_forces_stop():
    cfg = PlannerConfig()
    assert resolve_caps(fresh_flags(v_max=60.0), 0.0, cfg, localization_stale=True) == 0.0


def test_caps_red_and_stop_flags():
    cfg = PlannerConfig()
    assert resolve_caps(fresh_flags(track_flag=TrackFlag.RED), 0.0, cfg) == 0.0
    assert resolve_caps(fresh_flags(veh_flag=VehFlag.STOP), 0.0, cfg) == 0.0


# ---------------------------------------------------------------------------
# path construction


def test_path_spacing_on_straight_with_cap_above_vref():
    rl = straight_raceline(v=50.0)
    cfg = PlannerConfig()
    pts, status = build_path(rl, 10.0, v_cap=56.0, v_current=50.0, cfg=cfg)
    assert len(pts) == 51
    assert status == 0
    assert np.all(np.abs(pts[:, 3] - 50.0) < 1e-9)
    gaps = np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1]))
    assert gaps == pytest.approx(np.full(50, 2.5), abs=1e-6)
    assert np.all(np.diff(pts[:, 4]) == pytest.approx(0.05))


def test_zero_cap_builds_deceleration_ramp():
    rl = straight_raceline(v=50.0)
    cfg = PlannerConfig()
    pts, status = build_path(rl, 10.0, v_cap=0.0, v_current=50.0, cfg=cfg)
    assert status == 1
    assert pts[0, 3] == pytest.approx(50.0)
    assert pts[1, 3] == pytest.approx(49.5)
    assert pts[2, 3] == pytest.approx(49.0)
    assert pts[-1, 3] == pytest.approx(max(0.0, 50.0 - 10.0 * 0.05 * 50))


def test_yellow_cap_applied_to_path_velocities():
    rl = straight_raceline(v=50.0)
    cfg = PlannerConfig()
    pts, _ = build_path(rl, 0.0, v_cap=MPH_80_IN_MPS, v_current=50.0, cfg=cfg)
    assert np.all(np.abs(pts[:, 3] - MPH_80_IN_MPS) < 1e-9)


# ---------------------------------------------------------------------------
# frame transform


def test_global_to_local_identity_at_origin():
    pts = np.array([[1.0, 2.0, 0.1, 30.0, 0.05]])
    out = global_to_local(pts, (0.0, 0.0, 0.0))
    assert out == pytest.approx(pts)


def test_global_to_local_translation():
    pts = np.array([[1.0, 0.0, 0.0, 30.0, 0.0]])
    out = global_to_local(pts, (1.0, 0.0, 0.0))
    assert out[0, :2] == pytest.approx([0.0, 0.0])


def test_global_to_local_rotation():
    pts = np.array([[2.0, 0.0, 0.0, 30.0, 0.0]])
    out = global_to_local(pts, (1.0, 0.0, math.pi / 2))
    assert out[0, :2] == pytest.approx([0.0, -1.0], abs=1e-12)
    assert out[0, 2] == pytest.approx(-math.pi / 2)
    assert out[0, 3:] == pytest.approx(pts[0, 3:])


# ---------------------------------------------------------------------------
# planner cycles


def test_planner_cycle_outputs_consistent_path_and_errors():
    rl = straight_raceline(v=50.0)
    planner = Planner([rl])
    est = make_est(20.0, 1.5, yaw=0.05)
    path = planner.cycle(est, fresh_flags(v_max=60.0), now=0.0)
    assert path.s_star == pytest.approx(20.0, abs=1e-5)
    assert path.cross_track == pytest.approx(1.5, abs=1e-6)
    assert path.heading_error == pytest.approx(0.05, abs=1e-9)
    # first point is the projection onto the line, in vehicle frame
    assert np.hypot(path.points[0, 0], path.points[0, 1]) == pytest.approx(
        1.5, abs=1e-5
    )


def test_planner_s_star_nondecreasing_during_forward_motion():
    rl = circle_raceline(49.0, v=20.0)
    planner = Planner([rl])
    s_prev = None
    for k in range(50):
        theta = 0.02 * k
        est = make_est(
            49.0 * math.cos(theta), 49.0 * math.sin(theta), yaw=theta + math.pi / 2, vx=20.0
        )
        path = planner.cycle(est, fresh_flags(v_max=30.0), now=0.02 * k)
        if s_prev is not None:
            ds = (path.s_star - s_prev) % rl.total_length
            assert ds < rl.total_length / 2  # moved forward, never backward
        s_prev = path.s_star


def test_planner_velocity_never_exceeds_cap_or_vref():
    rl = circle_raceline(49.0, v=29.7)
    planner = Planner([rl])
    est = make_est(49.0, 0.0, yaw=math.pi / 2, vx=25.0)
    for cap in (60.0, 29.7, 20.0, 5.0):
        path = planner.cycle(est, fresh_flags(v_max=cap), now=0.0)
        assert np.all(path.points[:, 3] <= min(cap, 29.7) + 1e-9)


def test_raceline_switch_requires_small_crosstrack():
    inner = circle_raceline(49.0)
    outer = circle_raceline(58.0)
    planner = Planner([inner, outer])
    est = make_est(49.0, 0.0, yaw=math.pi / 2)
    # request switch while 9 m away from the outer line: refused
    flags = fresh_flags(v_max=30.0, active_raceline=1)
    planner.cycle(est, flags, now=0.0)
    assert planner.active == 0
    # drive near the outer line: accepted
    est2 = make_est(57.2, 0.0, yaw=math.pi / 2)
    planner.cycle(est2, flags, now=0.02)
    assert planner.active == 1
