"""Small planar/angular geometry helpers shared across the stack."""
from __future__ import annotations

import math

import numpy as np

TAU = 2.0 * math.pi
EARTH_RADIUS_M = 6371008.8
GRAVITY = 9.81


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, TAU)
    if a > math.pi:
        a -= TAU
    elif a <= -math.pi:
        a += TAU
    return a


def wrap_angle_array(a: np.ndarray) -> np.ndarray:
    w = np.remainder(a, TAU)
    w[w > math.pi] -= TAU
    return w


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def rpy_to_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Body-to-world rotation, z-y-x (yaw, pitch, roll) convention."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def euler_rate_matrix(roll: float, pitch: float) -> np.ndarray:
    """Maps body angular rates to roll/pitch/yaw time derivatives.

    Valid away from pitch = +-pi/2; pitch stays small for a ground vehicle.
    """
    cr, sr = math.cos(roll), math.sin(roll)
    cp = math.cos(pitch)
    tp = math.tan(pitch)
    return np.array(
        [
            [1.0, sr * tp, cr * tp],
            [0.0, cr, -sr],
            [0.0, sr / cp, cr / cp],
        ]
    )


def lonlat_to_enu(
    lon_deg: np.ndarray, lat_deg: np.ndarray, lon0_deg: float, lat0_deg: float
) -> np.ndarray:
    """Equirectangular projection around the origin latitude; returns (N, 2) meters."""
    lat0 = math.radians(lat0_deg)
    east = np.radians(np.asarray(lon_deg) - lon0_deg) * EARTH_RADIUS_M * math.cos(lat0)
    north = np.radians(np.asarray(lat_deg) - lat0_deg) * EARTH_RADIUS_M
    return np.column_stack([east, north])


def polyline_arclength(points: np.ndarray, closed: bool = False) -> np.ndarray:
    """Cumulative chord length per vertex; for closed polylines the wrap
    segment is not included (length array has one entry per vertex)."""
    pts = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def polyline_total_length(points: np.ndarray, closed: bool = False) -> float:
    pts = np.asarray(points, dtype=float)
    total = float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
    if closed:
        total += float(np.linalg.norm(pts[0] - pts[-1]))
    return total


def discrete_curvature(points: np.ndarray, closed: bool) -> np.ndarray:
    """Signed curvature of a polyline from central differences.

    Assumes roughly uniform spacing; positive curvature turns left.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n < 3:
        return np.zeros(n)
    if closed:
        prv = np.roll(pts, 1, axis=0)
        nxt = np.roll(pts, -1, axis=0)
    else:
        prv = np.vstack([pts[0] - (pts[1] - pts[0]), pts[:-1]])
        nxt = np.vstack([pts[1:], pts[-1] + (pts[-1] - pts[-2])])
    d1 = (nxt - prv) / 2.0
    d2 = nxt - 2.0 * pts + prv
    speed_sq = np.sum(d1 * d1, axis=1)
    cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = np.where(speed_sq > 1e-12, cross / np.power(speed_sq, 1.5), 0.0)
    return kappa


def resample_polyline(points: np.ndarray, spacing: float, closed: bool) -> np.ndarray:
    """Resample a polyline at (approximately) uniform arc-length spacing.

    Closed polylines are resampled over the full loop excluding the duplicate
    end vertex; the returned array never repeats the first point.
    """
    pts = np.asarray(points, dtype=float)
    if closed and np.linalg.norm(pts[0] - pts[-1]) > 1e-9:
        pts = np.vstack([pts, pts[0]])
    s = polyline_arclength(pts)
    total = s[-1]
    if total <= 0:
        raise ValueError("degenerate polyline with zero length")
    n = max(int(round(total / spacing)), 4)
    if closed:
        targets = np.linspace(0.0, total, n, endpoint=False)
    else:
        targets = np.linspace(0.0, total, n + 1)
    x = np.interp(targets, s, pts[:, 0])
    y = np.interp(targets, s, pts[:, 1])
    return np.column_stack([x, y])
