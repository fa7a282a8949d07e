"""Track ingestion and offline raceline generation.

Pipeline: load or synthesize track boundaries, smooth them, move a lateral
offset along the centerline normals to minimize summed squared curvature
(linearized curvature, box-constrained least squares), attach a
curvature-limited velocity profile, and fit a periodic quintic spline whose
parameter is arc length in meters.
"""
from __future__ import annotations

import csv
import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import PPoly, make_interp_spline
from scipy.optimize import minimize

from .geometry import (
    discrete_curvature,
    lonlat_to_enu,
    polyline_arclength,
    resample_polyline,
)


class TrackError(Exception):
    pass


class GeometryError(TrackError):
    pass


class ParseError(TrackError):
    pass


class OptimizationError(TrackError):
    pass


MIN_BOUNDARY_POINTS = 16
DEFAULT_STATION_SPACING = 2.0
DEFAULT_VEHICLE_WIDTH = 2.0


@dataclass(frozen=True)
class TrackBoundaries:
    """Left/right boundary polylines at corresponding stations (no duplicate
    closing vertex for closed tracks) plus optional banking metadata.

    Banking is a piecewise-linear map from centerline arc length to the road
    roll angle in radians (positive rolls the left edge up).
    """

    left: np.ndarray
    right: np.ndarray
    closed: bool
    banking: np.ndarray | None = None  # (M, 2) columns: arc length, roll

    def __post_init__(self):
        if len(self.left) != len(self.right):
            raise GeometryError("left/right boundary point counts differ")
        if len(self.left) < MIN_BOUNDARY_POINTS:
            raise GeometryError(
                f"boundaries need >= {MIN_BOUNDARY_POINTS} points, got {len(self.left)}"
            )

    @property
    def centerline(self) -> np.ndarray:
        return 0.5 * (self.left + self.right)

    @property
    def widths(self) -> np.ndarray:
        return np.linalg.norm(self.left - self.right, axis=1)

    def validate(self, vehicle_width: float = DEFAULT_VEHICLE_WIDTH) -> None:
        center = self.centerline
        tangents = _tangents(center, self.closed)
        to_left = self.left - center
        to_right = self.right - center
        d_left = tangents[:, 0] * to_left[:, 1] - tangents[:, 1] * to_left[:, 0]
        d_right = tangents[:, 0] * to_right[:, 1] - tangents[:, 1] * to_right[:, 0]
        signed_width = d_left - d_right
        bad = np.nonzero(signed_width <= vehicle_width)[0]
        if bad.size:
            raise GeometryError(
                f"boundaries cross or pinch below vehicle width at station {bad[0]}"
            )

    def bank_at_station(self, s: np.ndarray | float) -> np.ndarray | float:
        if self.banking is None:
            return np.zeros_like(np.asarray(s, dtype=float)) if np.ndim(s) else 0.0
        return np.interp(s, self.banking[:, 0], self.banking[:, 1])


@dataclass(frozen=True)
class VelocityProfileParams:
    a_lat_max: float = 18.0
    a_lon_accel_max: float = 2.0
    a_lon_brake_max: float = 10.0
    v_cap: float = 60.0

    def __post_init__(self):
        for name in ("a_lat_max", "a_lon_accel_max", "a_lon_brake_max", "v_cap"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


def _tangents(points: np.ndarray, closed: bool) -> np.ndarray:
    if closed:
        diff = np.roll(points, -1, axis=0) - np.roll(points, 1, axis=0)
    else:
        diff = np.gradient(points, axis=0)
    norms = np.linalg.norm(diff, axis=1)
    norms[norms < 1e-12] = 1.0
    return diff / norms[:, None]


def _left_normals(points: np.ndarray, closed: bool) -> np.ndarray:
    t = _tangents(points, closed)
    return np.column_stack([-t[:, 1], t[:, 0]])


# ---------------------------------------------------------------------------
# Boundary ingestion


def load_boundaries(
    path: str | Path,
    fmt: str | None = None,
    spacing: float = DEFAULT_STATION_SPACING,
    vehicle_width: float = DEFAULT_VEHICLE_WIDTH,
) -> TrackBoundaries:
    """Load boundary polylines from a KML (two LineStrings, lon/lat) or a CSV
    with header ``left_x,left_y,right_x,right_y`` and resample them to uniform
    station spacing.  KML coordinates are projected to a local ENU frame whose
    origin is the first left-boundary point.
    """
    path = Path(path)
    if fmt is None:
        fmt = "kml" if path.suffix.lower() == ".kml" else "csv"
    if fmt == "kml":
        left, right = _parse_kml(path)
    elif fmt == "csv":
        left, right = _parse_boundary_csv(path)
    else:
        raise ParseError(f"unknown boundary format {fmt!r}")
    return boundaries_from_polylines(
        left, right, spacing=spacing, vehicle_width=vehicle_width
    )


def boundaries_from_polylines(
    left: np.ndarray,
    right: np.ndarray,
    spacing: float = DEFAULT_STATION_SPACING,
    vehicle_width: float = DEFAULT_VEHICLE_WIDTH,
    banking: np.ndarray | None = None,
) -> TrackBoundaries:
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    closed_l = np.linalg.norm(left[0] - left[-1]) < 1e-6
    closed_r = np.linalg.norm(right[0] - right[-1]) < 1e-6
    closed = bool(closed_l and closed_r)
    n_stations = max(
        int(round(np.sum(np.linalg.norm(np.diff(left, axis=0), axis=1)) / spacing)),
        MIN_BOUNDARY_POINTS,
    )
    left_rs = _resample_to_count(left, n_stations, closed)
    right_rs = _resample_to_count(right, n_stations, closed)
    out = TrackBoundaries(left=left_rs, right=right_rs, closed=closed, banking=banking)
    out.validate(vehicle_width)
    return out


def _resample_to_count(points: np.ndarray, n: int, closed: bool) -> np.ndarray:
    pts = points
    if closed and np.linalg.norm(pts[0] - pts[-1]) > 1e-9:
        pts = np.vstack([pts, pts[0]])
    s = polyline_arclength(pts)
    if np.any(np.diff(s) <= 0):
        raise GeometryError("boundary polyline contains duplicate points")
    if closed:
        targets = np.linspace(0.0, s[-1], n, endpoint=False)
    else:
        targets = np.linspace(0.0, s[-1], n)
    return np.column_stack(
        [np.interp(targets, s, pts[:, 0]), np.interp(targets, s, pts[:, 1])]
    )


def _parse_kml(path: Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise ParseError(f"{path}: malformed KML: {exc}") from exc
    coords = [
        el.text
        for el in root.iter()
        if el.tag.endswith("coordinates") and el.text and el.text.strip()
    ]
    if len(coords) < 2:
        raise ParseError(f"{path}: expected two LineString coordinate blocks")
    rings = []
    for block in coords[:2]:
        pts = []
        for i, token in enumerate(block.split()):
            parts = token.split(",")
            if len(parts) < 2:
                raise ParseError(f"{path}: bad coordinate element {i}: {token!r}")
            pts.append((float(parts[0]), float(parts[1])))
        rings.append(np.asarray(pts))
    lon0, lat0 = rings[0][0]
    return tuple(
        lonlat_to_enu(r[:, 0], r[:, 1], lon0, lat0) for r in rings
    )  # type: ignore[return-value]


def _parse_boundary_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        expect = ["left_x", "left_y", "right_x", "right_y"]
        if [h.strip() for h in header] != expect:
            raise ParseError(f"{path}: header must be {','.join(expect)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row[:4]])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise ParseError(f"{path}: no data rows")
    arr = np.asarray(rows)
    return arr[:, 0:2], arr[:, 2:4]


# ---------------------------------------------------------------------------
# Smoothing


def smooth_boundaries(b: TrackBoundaries, window: int) -> TrackBoundaries:
    """Shrink-corrected moving average ("twicing": 2*MA - MA(MA)) applied to
    each boundary, so an already-smooth arc is nearly a fixed point while
    high-frequency zig-zag is strongly attenuated.

    The shrink correction is a mild sharpener, so at a genuine curvature
    discontinuity (straight joining an arc) the local curvature may ring
    upward by a few percent; the max-norm guard below allows 10% for that
    case while still catching real geometry damage.
    """
    if window % 2 == 0 or window < 1:
        raise ValueError("window must be odd and >= 1")
    if window == 1:
        return b
    left = _twiced_moving_average(b.left, window, b.closed)
    right = _twiced_moving_average(b.right, window, b.closed)
    out = TrackBoundaries(left=left, right=right, closed=b.closed, banking=b.banking)
    w_in, w_out = b.widths, out.widths
    rel = np.abs(w_out - w_in) / np.maximum(w_in, 1e-9)
    if np.any(rel > 0.05):
        raise GeometryError(
            f"smoothing changed track width by {rel.max() * 100:.1f}% (> 5%)"
        )
    kmax_in = max(
        np.abs(discrete_curvature(b.left, b.closed)).max(),
        np.abs(discrete_curvature(b.right, b.closed)).max(),
    )
    kmax_out = max(
        np.abs(discrete_curvature(left, b.closed)).max(),
        np.abs(discrete_curvature(right, b.closed)).max(),
    )
    if kmax_out > kmax_in * 1.10 + 1e-9:
        raise GeometryError("smoothing increased boundary curvature max-norm")
    return out


def _moving_average(points: np.ndarray, window: int, closed: bool) -> np.ndarray:
    half = window // 2
    if closed:
        padded = np.vstack([points[-half:], points, points[:half]])
    else:
        # extend open ends with a least-squares line through the edge window:
        # exact for straight boundaries, phase-free for oscillatory noise
        k = min(len(points), max(window, 4))
        head_idx = np.arange(k)
        tail_idx = np.arange(len(points) - k, len(points))
        head = np.column_stack(
            [
                np.polyval(np.polyfit(head_idx, points[:k, c], 1), np.arange(-half, 0))
                for c in range(2)
            ]
        )
        tail = np.column_stack(
            [
                np.polyval(
                    np.polyfit(tail_idx, points[-k:, c], 1),
                    np.arange(len(points), len(points) + half),
                )
                for c in range(2)
            ]
        )
        padded = np.vstack([head, points, tail])
    kernel = np.ones(window) / window
    out = np.column_stack(
        [np.convolve(padded[:, i], kernel, mode="valid") for i in range(2)]
    )
    return out


def _twiced_moving_average(points: np.ndarray, window: int, closed: bool) -> np.ndarray:
    once = _moving_average(points, window, closed)
    twice = _moving_average(once, window, closed)
    return 2.0 * once - twice


# ---------------------------------------------------------------------------
# Minimum-curvature lateral-offset optimization


def optimize_min_curvature(
    b: TrackBoundaries,
    half_width_margin: float,
    iterations: int = 8,
    roughness_weight: float = 0.05,
) -> np.ndarray:
    """Move each centerline station along its normal to minimize the summed
    squared curvature, constrained to stay ``half_width_margin`` away from
    both boundaries.

    Each outer iteration linearizes the discrete curvature around the current
    offsets (a Gauss-Newton step) and solves the resulting box-constrained
    least-squares problem.  The linearization keeps the parameter-stretch term
    of the curvature denominator; dropping it makes widening a constant-radius
    arc look like a curvature increase and stalls exactly the case a speedway
    needs.  A small second-difference penalty on the offsets suppresses
    station-scale chatter without biasing constant offsets (it vanishes for a
    uniform widening).  Returns the optimized path polyline.
    """
    center = b.centerline
    closed = b.closed
    n = len(center)
    normals = _left_normals(center, closed)

    d_left = _min_distance_to_polyline(center, b.left, closed)
    d_right = _min_distance_to_polyline(center, b.right, closed)
    lo = -(d_right - half_width_margin)
    hi = d_left - half_width_margin
    if np.any(lo >= hi):
        raise OptimizationError(
            "infeasible margin: no lateral room left at some station"
        )
    if not closed:
        # pin open-track endpoints to the centerline
        lo[[0, 1, -2, -1]] = -1e-12
        hi[[0, 1, -2, -1]] = 1e-12

    seg = np.linalg.norm(np.diff(center, axis=0), axis=1)
    if closed:
        seg = np.append(seg, np.linalg.norm(center[0] - center[-1]))
    ds = float(np.mean(seg))

    d1, d2 = _difference_operators(n, ds, closed)
    reg = (roughness_weight * d2).tocsr()  # same 1/ds^2 scale as curvature rows
    kappa_center = _stencil_curvature(center, d1, d2)
    obj_center = float(np.sum(kappa_center**2))
    kappa_cap = float(np.abs(kappa_center).max())

    # pass 1: minimize the plain objective.  On corner-and-straight tracks the
    # optimum lowers the peak curvature by itself; on speedway ovals the
    # sum-of-squares optimum sharpens short apexes, so if the result exceeds
    # the centerline's max |kappa| (a contract we must keep) rerun with a
    # strong hinge at that cap.
    alpha = _solve_offsets(center, normals, d1, d2, reg, lo, hi, None, iterations)
    kappa_alpha = _stencil_curvature(center + alpha[:, None] * normals, d1, d2)
    if np.abs(kappa_alpha).max() > kappa_cap + 1e-9:
        alpha = _solve_offsets(
            center, normals, d1, d2, reg, lo, hi, kappa_cap, iterations
        )

    path = center + alpha[:, None] * normals
    kappa_path = _stencil_curvature(path, d1, d2)
    worse_obj = float(np.sum(kappa_path**2)) > obj_center
    worse_max = np.abs(kappa_path).max() > kappa_cap + 1e-9
    if worse_obj or worse_max:
        # never lose to the trivial feasible point
        return center.copy()
    return path


def _solve_offsets(center, normals, d1, d2, reg, lo, hi, kappa_cap, iterations):
    """Minimize sum(kappa^2) + roughness (+ optional peak hinge) over the
    box: a few projected Gauss-Newton steps to move the nearly-flat
    long-wavelength modes, then a box-constrained quasi-Newton polish."""
    n = len(center)
    peak_weight = 1e7 if kappa_cap is not None else 0.0
    cap = kappa_cap if kappa_cap is not None else np.inf

    def fun_and_grad(a_vec: np.ndarray):
        pts = center + a_vec[:, None] * normals
        kap = _stencil_curvature(pts, d1, d2)
        rough = reg @ a_vec
        excess = np.maximum(np.abs(kap) - cap, 0.0) if peak_weight else 0.0
        value = float(
            np.sum(kap**2)
            + np.sum(rough**2)
            + (peak_weight * np.sum(excess**2) if peak_weight else 0.0)
        )
        jac = _curvature_jacobian(pts, normals, d1, d2)
        scale = 2.0 * kap
        if peak_weight:
            scale = scale + 2.0 * peak_weight * np.sign(kap) * excess
        grad = jac.T @ scale + 2.0 * (reg.T @ rough)
        return value, np.asarray(grad).ravel()

    alpha = np.zeros(n)
    objective, _ = fun_and_grad(alpha)
    ridge = 1e-12 * sp.identity(n)
    for _ in range(max(2, iterations // 2)):
        pts = center + alpha[:, None] * normals
        kap = _stencil_curvature(pts, d1, d2)
        jac = _curvature_jacobian(pts, normals, d1, d2)
        resid = kap.copy()
        if peak_weight:
            excess = np.maximum(np.abs(kap) - cap, 0.0)
            resid = resid + peak_weight * np.sign(kap) * excess
        hess = (jac.T @ jac + reg.T @ reg + ridge).tocsc()
        grad = jac.T @ resid + reg.T @ (reg @ alpha)
        step = -spla.splu(hess).solve(np.asarray(grad).ravel())
        if not np.all(np.isfinite(step)):
            raise OptimizationError("curvature step produced non-finite offsets")
        improved = False
        for _ in range(14):
            cand = np.clip(alpha + step, lo, hi)
            cand_obj, _ = fun_and_grad(cand)
            if cand_obj < objective - 1e-18:
                alpha, objective, improved = cand, cand_obj, True
                break
            step = 0.5 * step
        if not improved:
            break

    res = minimize(
        fun_and_grad,
        alpha,
        jac=True,
        method="L-BFGS-B",
        bounds=np.column_stack([lo, hi]),
        options={
            "maxiter": 400 * iterations,
            "ftol": 1e-17,
            "gtol": 1e-13,
            "maxcor": 30,
        },
    )
    if np.all(np.isfinite(res.x)) and res.fun < objective:
        alpha = np.clip(res.x, lo, hi)
    return alpha


def _difference_operators(n: int, ds: float, closed: bool):
    """Sparse central first/second difference stencils (periodic if closed)."""
    idx = np.arange(n)
    if closed:
        prv = (idx - 1) % n
        nxt = (idx + 1) % n
    else:
        prv = np.clip(idx - 1, 0, n - 1)
        nxt = np.clip(idx + 1, 0, n - 1)
    rows = np.concatenate([idx, idx])
    d1 = sp.csr_matrix(
        (
            np.concatenate([np.full(n, 1.0 / (2 * ds)), np.full(n, -1.0 / (2 * ds))]),
            (rows, np.concatenate([nxt, prv])),
        ),
        shape=(n, n),
    )
    d2 = sp.csr_matrix(
        (
            np.concatenate(
                [np.full(n, 1.0 / ds**2), np.full(n, 1.0 / ds**2), np.full(n, -2.0 / ds**2)]
            ),
            (np.concatenate([idx, idx, idx]), np.concatenate([nxt, prv, idx])),
        ),
        shape=(n, n),
    )
    return d1, d2


def _stencil_curvature(points: np.ndarray, d1, d2) -> np.ndarray:
    xp, yp = d1 @ points[:, 0], d1 @ points[:, 1]
    xpp, ypp = d2 @ points[:, 0], d2 @ points[:, 1]
    speed = np.maximum(np.hypot(xp, yp), 1e-9)
    return (xp * ypp - yp * xpp) / speed**3


def _curvature_jacobian(points: np.ndarray, normals: np.ndarray, d1, d2):
    """Exact d kappa / d alpha of the discrete curvature, including the
    derivative of the |p'|^-3 normalization.  Sparse (tridiagonal plus
    periodic corners)."""
    xp, yp = d1 @ points[:, 0], d1 @ points[:, 1]
    xpp, ypp = d2 @ points[:, 0], d2 @ points[:, 1]
    speed = np.maximum(np.hypot(xp, yp), 1e-9)
    cross = xp * ypp - yp * xpp

    def rowscale(vec):
        return sp.diags(vec)

    nx, ny = sp.diags(normals[:, 0]), sp.diags(normals[:, 1])
    d1nx, d1ny = d1 @ nx, d1 @ ny
    d2nx, d2ny = d2 @ nx, d2 @ ny
    num_jac = (
        rowscale(xp) @ d2ny
        + rowscale(ypp) @ d1nx
        - rowscale(yp) @ d2nx
        - rowscale(xpp) @ d1ny
    )
    speed_jac = rowscale(xp / speed) @ d1nx + rowscale(yp / speed) @ d1ny
    return rowscale(1.0 / speed**3) @ num_jac - rowscale(3.0 * cross / speed**4) @ speed_jac


def _min_distance_to_polyline(
    queries: np.ndarray, poly: np.ndarray, closed: bool
) -> np.ndarray:
    """Min distance from each query point to a polyline, vectorized over
    segments in chunks to bound memory."""
    pts = np.vstack([poly, poly[0]]) if closed else poly
    a = pts[:-1]
    ab = pts[1:] - a
    ab_sq = np.maximum(np.sum(ab * ab, axis=1), 1e-12)
    out = np.full(len(queries), np.inf)
    chunk = max(1, 2_000_000 // max(len(a), 1))
    for start in range(0, len(queries), chunk):
        q = queries[start : start + chunk]
        diff = q[:, None, :] - a[None, :, :]
        t = np.clip(np.einsum("qsd,sd->qs", diff, ab) / ab_sq, 0.0, 1.0)
        proj = a[None, :, :] + t[:, :, None] * ab[None, :, :]
        d = np.linalg.norm(q[:, None, :] - proj, axis=2).min(axis=1)
        out[start : start + len(q)] = d
    return out


# ---------------------------------------------------------------------------
# Velocity profile


def compute_velocity_profile(
    path: np.ndarray, params: VelocityProfileParams, closed: bool
) -> np.ndarray:
    """Curvature-limited speed with forward (traction) and backward (braking)
    longitudinal passes; closed tracks wrap both passes around the lap."""
    pts = np.asarray(path, dtype=float)
    if len(pts) < 3:
        raise ValueError("velocity profile needs at least 3 path points")
    kappa = np.abs(discrete_curvature(pts, closed))
    v = np.minimum(params.v_cap, np.sqrt(params.a_lat_max / np.maximum(kappa, 1e-9)))

    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if closed:
        seg = np.append(seg, np.linalg.norm(pts[0] - pts[-1]))

    n = len(pts)
    passes = 2 if closed else 1
    for _ in range(passes):
        for i in range(n):  # forward, acceleration-limited
            j = (i + 1) % n
            if not closed and j == 0:
                break
            cap = math.sqrt(v[i] ** 2 + 2.0 * params.a_lon_accel_max * seg[i])
            if v[j] > cap:
                v[j] = cap
    for _ in range(passes):
        for i in range(n - 1, -1, -1):  # backward, braking-limited
            j = (i + 1) % n
            if not closed and j == 0:
                continue
            cap = math.sqrt(v[j] ** 2 + 2.0 * params.a_lon_brake_max * seg[i])
            if v[i] > cap:
                v[i] = cap
    return v


# ---------------------------------------------------------------------------
# Quintic-spline raceline


@dataclass
class Raceline:
    """Reference path (x, y, v_ref) with a quintic-spline representation
    parameterized by arc length in meters.

    Evaluation is on the hot path of the online planner, so the per-segment
    polynomial coefficients are unpacked once into plain arrays and evaluated
    by Horner's rule instead of going through PPoly call overhead."""

    samples: np.ndarray  # (N, 3): x, y, v_ref
    stations: np.ndarray  # (N,) arc length of each sample
    total_length: float
    closed: bool
    pp_x: PPoly
    pp_y: PPoly
    banking: np.ndarray | None = None  # (M, 2): arc length, roll angle rad
    _tables: dict = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self._tables is not None:
            return
        lo, hi = float(self.stations[0]), float(self.total_length)
        breaks = self.pp_x.x
        starts, ends = breaks[:-1], breaks[1:]
        # keep only real (nonzero-width) intervals inside the data domain:
        # the B-spline conversion pads repeated boundary knots and
        # extrapolation segments whose columns must never be selected
        mask = (ends - starts > 1e-12) & (starts >= lo - 1e-9) & (ends <= hi + 1e-9)
        cols = np.nonzero(mask)[0]
        seg_starts = np.ascontiguousarray(starts[cols])
        cx = np.ascontiguousarray(self.pp_x.c[:, cols])
        cy = np.ascontiguousarray(self.pp_y.c[:, cols])
        k = cx.shape[0] - 1
        fact1 = np.arange(k, -1, -1.0)
        fact2 = fact1 * np.maximum(fact1 - 1.0, 0.0)
        v = self.samples[:, 2]
        st = self.stations
        if self.closed:
            st = np.append(st, self.total_length)
            v = np.append(v, v[0])
        self._tables = {
            "seg_starts": seg_starts,
            "cx": cx,
            "cy": cy,
            "cx1": cx[:-1] * fact1[:-1, None],
            "cy1": cy[:-1] * fact1[:-1, None],
            "cx2": cx[:-2] * fact2[:-2, None],
            "cy2": cy[:-2] * fact2[:-2, None],
            "v_st": st,
            "v_val": v,
        }

    def wrap_s(self, s):
        if self.closed:
            return np.remainder(s, self.total_length)
        return np.clip(s, 0.0, self.total_length)

    def _segments(self, sw):
        starts = self._tables["seg_starts"]
        seg = np.clip(np.searchsorted(starts, sw, side="right") - 1, 0, len(starts) - 1)
        local = sw - starts[seg]
        return seg, local

    @staticmethod
    def _horner(coeffs, seg, local):
        out = coeffs[0][seg]
        for row in coeffs[1:]:
            out = out * local + row[seg]
        return out

    def eval_all(self, s):
        """(x, y, x', y', x'', y'') at arc length s (scalar or array)."""
        sw = self.wrap_s(np.asarray(s, dtype=float))
        seg, local = self._segments(sw)
        t = self._tables
        return (
            self._horner(t["cx"], seg, local),
            self._horner(t["cy"], seg, local),
            self._horner(t["cx1"], seg, local),
            self._horner(t["cy1"], seg, local),
            self._horner(t["cx2"], seg, local),
            self._horner(t["cy2"], seg, local),
        )

    def position(self, s):
        x, y, *_ = self.eval_all(s)
        return np.stack([x, y], axis=-1)

    def derivatives(self, s):
        """Returns (p, dp/ds, d2p/ds2), each shaped (..., 2)."""
        x, y, dx, dy, ddx, ddy = self.eval_all(s)
        p = np.stack([x, y], axis=-1)
        d1 = np.stack([dx, dy], axis=-1)
        d2 = np.stack([ddx, ddy], axis=-1)
        return p, d1, d2

    def heading(self, s):
        _, _, dx, dy, _, _ = self.eval_all(s)
        return np.arctan2(dy, dx)

    def curvature(self, s):
        _, _, dx, dy, ddx, ddy = self.eval_all(s)
        speed = np.maximum(np.hypot(dx, dy), 1e-12)
        return (dx * ddy - dy * ddx) / speed**3

    def v_ref(self, s):
        sw = self.wrap_s(s)
        t = self._tables
        return np.interp(sw, t["v_st"], t["v_val"])

    def bank(self, s):
        if self.banking is None:
            return np.zeros_like(np.asarray(s, dtype=float)) if np.ndim(s) else 0.0
        sw = self.wrap_s(s)
        return np.interp(sw, self.banking[:, 0], self.banking[:, 1])

    def eval(self, s):
        """(x, y, heading, curvature, bank, v_ref) at arc length s."""
        x, y, dx, dy, ddx, ddy = self.eval_all(s)
        heading = np.arctan2(dy, dx)
        speed = np.maximum(np.hypot(dx, dy), 1e-12)
        kappa = (dx * ddy - dy * ddx) / speed**3
        return (x, y, heading, kappa, self.bank(s), self.v_ref(s))


def fit_quintic_spline(
    samples: np.ndarray,
    closed: bool,
    banking: np.ndarray | None = None,
) -> Raceline:
    """Fit C2 (in fact C4) quintic splines x(s), y(s) through the samples.

    The parameter starts as cumulative chord length and is refined once by
    arc-length reintegration so that s is meters along the path.  Samples may
    be (N, 2) or (N, 3) with a v_ref column.
    """
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 2 or arr.shape[1] not in (2, 3):
        raise ValueError("samples must be (N, 2) or (N, 3)")
    if len(arr) < 6:
        raise ValueError("quintic spline fit needs at least 6 samples")
    xy = arr[:, :2]
    v_ref = arr[:, 2] if arr.shape[1] == 3 else np.full(len(arr), 1.0)

    stations = polyline_arclength(xy)
    if np.any(np.diff(stations) <= 0):
        raise ValueError("duplicate samples: chord-length stations must increase")

    pp_x, pp_y, knots = _fit_xy(xy, stations, closed)
    # one refinement pass: reparameterize the knots by integrated arc length
    arc = _integrate_arclength(pp_x, pp_y, knots)
    arc = arc[: len(xy)]  # drop the closing knot again for closed tracks
    pp_x, pp_y, knots = _fit_xy(xy, arc, closed)
    total = float(_integrate_arclength(pp_x, pp_y, knots)[-1])

    return Raceline(
        samples=np.column_stack([xy, v_ref]),
        stations=arc,
        total_length=total,
        closed=closed,
        pp_x=pp_x,
        pp_y=pp_y,
        banking=banking,
    )


def _fit_xy(xy: np.ndarray, stations: np.ndarray, closed: bool):
    if closed:
        closing = np.linalg.norm(xy[-1] - xy[0])
        knots = np.append(stations, stations[-1] + closing)
        xs = np.append(xy[:, 0], xy[0, 0])
        ys = np.append(xy[:, 1], xy[0, 1])
        bc = "periodic"
    else:
        knots = stations
        xs, ys = xy[:, 0], xy[:, 1]
        bc = ([(2, 0.0), (3, 0.0)], [(2, 0.0), (3, 0.0)])
    pp_x = PPoly.from_spline(make_interp_spline(knots, xs, k=5, bc_type=bc))
    pp_y = PPoly.from_spline(make_interp_spline(knots, ys, k=5, bc_type=bc))
    return pp_x, pp_y, knots


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(7)


def _integrate_arclength(pp_x: PPoly, pp_y: PPoly, knots: np.ndarray) -> np.ndarray:
    """Cumulative arc length at each knot via per-interval Gauss-Legendre."""
    dx, dy = pp_x.derivative(), pp_y.derivative()
    a, b = knots[:-1], knots[1:]
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    pts = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    speed = np.hypot(dx(pts), dy(pts))
    seg = half * (speed @ _GL_WEIGHTS)
    return np.concatenate([[0.0], np.cumsum(seg)])


# ---------------------------------------------------------------------------
# Raceline CSV + sidecar persistence


def save_raceline(raceline: Raceline, path: str | Path) -> None:
    """CSV with the exact header ``x,y,v_ref`` plus a JSON sidecar
    (<path>.json) carrying closure, stations, and banking for exact reload."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "v_ref"])
        for x, y, v in raceline.samples:
            writer.writerow([repr(float(x)), repr(float(y)), repr(float(v))])
    sidecar = {
        "closed": raceline.closed,
        "total_length": raceline.total_length,
        "banking": None
        if raceline.banking is None
        else [[float(s), float(b)] for s, b in raceline.banking],
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_raceline(path: str | Path) -> Raceline:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty raceline file") from None
        if [h.strip() for h in header] != ["x", "y", "v_ref"]:
            raise ParseError(f"{path}: header must be exactly 'x,y,v_ref'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row[:3]])
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise ParseError(f"{path}: raceline has a header but no samples")
    samples = np.asarray(rows)
    if np.any(samples[:, 2] <= 0):
        raise ParseError(f"{path}: v_ref must be strictly positive everywhere")

    sidecar_path = Path(str(path) + ".json")
    banking = None
    if sidecar_path.exists():
        meta = json.loads(sidecar_path.read_text())
        closed = bool(meta["closed"])
        if meta.get("banking") is not None:
            banking = np.asarray(meta["banking"], dtype=float)
    else:
        gap = np.linalg.norm(samples[0, :2] - samples[-1, :2])
        spacing = np.median(
            np.linalg.norm(np.diff(samples[:, :2], axis=0), axis=1)
        )
        closed = bool(gap < 3.0 * spacing)
    return fit_quintic_spline(samples, closed=closed, banking=banking)


# ---------------------------------------------------------------------------
# Synthetic tracks (desk-scale stand-ins for surveyed boundary files)


def make_straight_boundaries(
    length: float = 400.0,
    width: float = 12.0,
    spacing: float = DEFAULT_STATION_SPACING,
    flat_banking: bool = False,
) -> TrackBoundaries:
    n = int(length / spacing) + 1
    x = np.linspace(0.0, length, n)
    left = np.column_stack([x, np.full(n, width / 2)])
    right = np.column_stack([x, np.full(n, -width / 2)])
    banking = np.array([[0.0, 0.0], [length, 0.0]]) if flat_banking else None
    return TrackBoundaries(left=left, right=right, closed=False, banking=banking)


def make_annulus_boundaries(
    r_inner: float = 40.0,
    r_outer: float = 50.0,
    spacing: float = DEFAULT_STATION_SPACING,
    flat_banking: bool = False,
) -> TrackBoundaries:
    r_mid = 0.5 * (r_inner + r_outer)
    n = int(round(2 * math.pi * r_mid / spacing))
    th = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
    # counterclockwise travel: the left-hand side is the inner circle
    left = np.column_stack([r_inner * np.cos(th), r_inner * np.sin(th)])
    right = np.column_stack([r_outer * np.cos(th), r_outer * np.sin(th)])
    banking = (
        np.array([[0.0, 0.0], [2 * math.pi * r_mid, 0.0]]) if flat_banking else None
    )
    return TrackBoundaries(left=left, right=right, closed=True, banking=banking)


def make_oval_boundaries(
    straight_long: float = 1006.0,
    straight_short: float = 201.0,
    corner_radius: float = 256.0,
    width: float = 15.24,
    bank_deg: float = 9.2,
    bank_ramp: float = 60.0,
    spacing: float = DEFAULT_STATION_SPACING,
) -> TrackBoundaries:
    """Speedway-style closed oval, counterclockwise: two long straights, two
    short straights, four quarter-circle corners banked toward the infield."""
    segs: list[tuple[str, float]] = [
        ("straight", straight_long),
        ("corner", corner_radius),
        ("straight", straight_short),
        ("corner", corner_radius),
        ("straight", straight_long),
        ("corner", corner_radius),
        ("straight", straight_short),
        ("corner", corner_radius),
    ]
    pos = np.array([0.0, 0.0])
    heading = 0.0
    center_pts: list[np.ndarray] = []
    bank_profile: list[tuple[float, float]] = []
    s_accum = 0.0
    bank = -math.radians(bank_deg)  # left turns: left edge lower = negative roll

    for kind, dim in segs:
        if kind == "straight":
            n = max(int(dim / spacing), 2)
            ts = np.linspace(0.0, dim, n, endpoint=False)
            d = np.array([math.cos(heading), math.sin(heading)])
            center_pts.append(pos + ts[:, None] * d)
            ramp = min(bank_ramp, dim / 2)
            if s_accum == 0.0:
                # the lap wraps mid-straight exit of the last corner: start at
                # the corner bank and ramp flat so bank(0) == bank(L)
                bank_profile += [(0.0, bank), (ramp, 0.0), (dim - ramp, 0.0)]
            else:
                bank_profile += [(s_accum + ramp, 0.0), (s_accum + dim - ramp, 0.0)]
            pos = pos + dim * d
            s_accum += dim
        else:
            arc_len = 0.5 * math.pi * dim
            n = max(int(arc_len / spacing), 4)
            ctr = pos + dim * np.array(
                [math.cos(heading + math.pi / 2), math.sin(heading + math.pi / 2)]
            )
            phis = heading - math.pi / 2 + np.linspace(
                0.0, math.pi / 2, n, endpoint=False
            )
            center_pts.append(
                ctr + dim * np.column_stack([np.cos(phis), np.sin(phis)])
            )
            bank_profile += [(s_accum, bank), (s_accum + arc_len, bank)]
            heading += math.pi / 2
            pos = ctr + dim * np.array(
                [math.cos(heading - math.pi / 2), math.sin(heading - math.pi / 2)]
            )
            s_accum += arc_len

    center = np.vstack(center_pts)
    normals = _left_normals(center, closed=True)
    left = center + (width / 2) * normals
    right = center - (width / 2) * normals
    banking = np.asarray(sorted(set(bank_profile)), dtype=float)
    return boundaries_from_polylines(
        np.vstack([left, left[0]]),
        np.vstack([right, right[0]]),
        spacing=spacing,
        banking=banking,
    )


def build_raceline(
    boundaries: TrackBoundaries,
    margin: float = 1.5,
    params: VelocityProfileParams | None = None,
    smooth_window: int = 5,
    optimizer_iterations: int = 3,
) -> Raceline:
    """Full offline pipeline: smooth, optimize, profile, and fit the spline."""
    params = params or VelocityProfileParams()
    smoothed = smooth_boundaries(boundaries, smooth_window)
    path = optimize_min_curvature(
        smoothed, half_width_margin=margin, iterations=optimizer_iterations
    )
    v = compute_velocity_profile(path, params, smoothed.closed)
    banking = None
    if boundaries.banking is not None:
        # transfer banking from centerline stations onto the optimized path
        s_center = polyline_arclength(smoothed.centerline)
        s_path = polyline_arclength(path)
        scale = s_path[-1] / max(s_center[-1], 1e-9)
        bank_vals = boundaries.bank_at_station(s_center)
        banking = np.column_stack([s_center * scale, bank_vals])
    return fit_quintic_spline(
        np.column_stack([path, v]), closed=smoothed.closed, banking=banking
    )
