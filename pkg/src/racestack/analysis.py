"""Scenario runner and post-run analysis.

Executes configured scenarios end-to-end into a run directory, then computes
per-lap tracking metrics (cross-track/heading ranges, velocity error) and
exports acceleration/slip-force datasets from the logged streams.  Metrics
are pure functions of the log, so a replay reproduces them exactly.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .planner import nearest_point_batch
from .scenario import ScenarioConfig
from .stack import RacingStack, obtain_raceline
from .telemetry import LogReader
from .track import Raceline, load_raceline, save_raceline
from .geometry import wrap_angle_array


@dataclass(frozen=True)
class LapMetrics:
    lap: int
    cross_track_min: float
    cross_track_max: float
    cross_track_rms: float
    heading_error_min: float
    heading_error_max: float
    heading_error_rms: float
    velocity_error_mean: float
    velocity_error_max: float
    velocity_error_mean_straights: float
    lap_time: float
    mean_speed: float


def _payload(rec) -> dict:
    return json.loads(rec.payload.decode())


def group_topics(records) -> dict[str, list]:
    out: dict[str, list] = {}
    for rec in records:
        out.setdefault(rec.topic, []).append(rec)
    return out


def station_series(raceline: Raceline, positions: np.ndarray) -> np.ndarray:
    """Nearest-station trace: coarse per-sample seed from the raceline
    sample grid, then one vectorized Newton refinement over the series."""
    coarse = raceline.samples[:, :2]
    seeds = np.empty(len(positions))
    chunk = max(1, 4_000_000 // max(len(coarse), 1))
    for start in range(0, len(positions), chunk):
        block = positions[start : start + chunk]
        d2 = (
            (block[:, None, 0] - coarse[None, :, 0]) ** 2
            + (block[:, None, 1] - coarse[None, :, 1]) ** 2
        )
        seeds[start : start + len(block)] = raceline.stations[np.argmin(d2, axis=1)]
    return nearest_point_batch(raceline, positions, seeds)


def detect_laps(stations: np.ndarray, total_length: float) -> list[tuple[int, int]]:
    """(start, end) index ranges of complete laps, detected at wrap crossings
    with a half-lap hysteresis so noise near the line cannot double count.
    A trace that begins past half distance (an approach to the line) is
    already armed for its first crossing."""
    laps = []
    half = total_length / 2
    armed = stations[0] >= half
    start_idx = None
    for i in range(1, len(stations)):
        step = stations[i] - stations[i - 1]
        # arm only on a *forward* pass of the half mark: a backward jitter
        # jump across the line also lands past half but with a huge step
        if not armed and stations[i - 1] < half <= stations[i] and step < half:
            armed = True
        if armed and step < -half:
            if start_idx is not None:
                laps.append((start_idx, i))
            start_idx = i
            armed = False
    return laps


def compute_lap_metrics(records, raceline: Raceline) -> list[LapMetrics]:
    topics = group_topics(records)
    est_recs = topics.get("estimated_state", [])
    dash_recs = topics.get("dashboard", [])
    if not est_recs:
        return []
    est = [_payload(r) for r in est_recs]
    positions = np.array([[e["position"][0], e["position"][1]] for e in est])
    times = np.array([r.stamp_ticks * 1e-3 for r in est_recs])
    yaws = np.array([e["rpy"][2] for e in est])
    speeds = np.array(
        [math.hypot(e["velocity"][0], e["velocity"][1]) for e in est]
    )
    stations = station_series(raceline, positions)
    x, y, dx, dy, _, _ = raceline.eval_all(stations)
    norm = np.maximum(np.hypot(dx, dy), 1e-12)
    cross = (
        (dx / norm) * (positions[:, 1] - y) - (dy / norm) * (positions[:, 0] - x)
    )
    head_err = wrap_angle_array(yaws - np.arctan2(dy, dx))
    kappa = np.abs(raceline.curvature(stations))

    dash_times = np.array([r.stamp_ticks * 1e-3 for r in dash_recs])
    dash_verr = np.array(
        [
            _payload(r)["target_velocity_mps"] - _payload(r)["actual_velocity_mps"]
            for r in dash_recs
        ]
    )

    metrics = []
    for lap_no, (i0, i1) in enumerate(detect_laps(stations, raceline.total_length), 1):
        sl = slice(i0, i1)
        t0, t1 = times[i0], times[i1 - 1]
        in_lap = (dash_times >= t0) & (dash_times <= t1)
        straight_mask = kappa[sl] < 1.0 / 1500.0
        # velocity error restricted to straights via the station timeline
        dash_straight = []
        for dt_i in np.nonzero(in_lap)[0]:
            j = int(np.searchsorted(times, dash_times[dt_i]))
            j = min(j, len(kappa) - 1)
            if kappa[j] < 1.0 / 1500.0:
                dash_straight.append(dash_verr[dt_i])
        verr_lap = dash_verr[in_lap]
        metrics.append(
            LapMetrics(
                lap=lap_no,
                cross_track_min=float(cross[sl].min()),
                cross_track_max=float(cross[sl].max()),
                cross_track_rms=float(np.sqrt(np.mean(cross[sl] ** 2))),
                heading_error_min=float(head_err[sl].min()),
                heading_error_max=float(head_err[sl].max()),
                heading_error_rms=float(np.sqrt(np.mean(head_err[sl] ** 2))),
                velocity_error_mean=float(verr_lap.mean()) if verr_lap.size else 0.0,
                velocity_error_max=float(np.abs(verr_lap).max()) if verr_lap.size else 0.0,
                velocity_error_mean_straights=float(np.mean(dash_straight))
                if dash_straight
                else 0.0,
                lap_time=float(t1 - t0),
                mean_speed=float(speeds[sl].mean()),
            )
        )
    return metrics


def export_dynamics(records, vehicle: dict) -> list[dict]:
    """Acceleration and slip/force samples: lateral/longitudinal specific
    force from the IMU, slip angles from the state stream, front lateral
    force from the steady-state front axle share m*a_lat*l_r/L."""
    topics = group_topics(records)
    imu_recs = topics.get("imu", [])
    est_recs = topics.get("estimated_state", [])
    if not imu_recs or not est_recs:
        return []
    mass = vehicle["mass"]
    l_f = vehicle["l_f"]
    wheelbase = vehicle["wheelbase"]
    l_r = wheelbase - l_f
    est_times = np.array([r.stamp_ticks for r in est_recs])
    rows = []
    for rec in imu_recs:
        imu = _payload(rec)
        j = int(np.searchsorted(est_times, rec.stamp_ticks))
        j = min(j, len(est_recs) - 1)
        est = _payload(est_recs[j])
        v = math.hypot(est["velocity"][0], est["velocity"][1])
        a_lat = imu["accel"][1]
        rows.append(
            {
                "t": rec.stamp_ticks * 1e-3,
                "a_lon": imu["accel"][0],
                "a_lat": a_lat,
                "v": v,
                "sigma_f": est["slip_angle_front"],
                "sigma_r": est["slip_angle_rear"],
                "f_yf": mass * a_lat * l_r / wheelbase,
            }
        )
    return rows


def write_dynamics_csv(rows: list[dict], path: Path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["t", "a_lon", "a_lat", "v", "sigma_f", "sigma_r", "f_yf"]
        )
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Scenario runner


@dataclass
class RunResult:
    run_dir: Path
    metrics: list[LapMetrics]
    emergency_occurred: bool
    exit_code: int
    fault_messages: list[str]
    verdicts: list[dict]


def run_scenario(cfg: ScenarioConfig, run_dir: str | Path, raceline=None) -> RunResult:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if raceline is None:
        raceline = obtain_raceline(cfg, run_dir)
    save_raceline(raceline, run_dir / "raceline.csv")
    stack = RacingStack(cfg, run_dir=run_dir, raceline=raceline)
    stack.run(cfg.duration_s)
    stack.close()

    manifest = {
        "name": cfg.name,
        "seed": cfg.seed,
        "duration_s": cfg.duration_s,
        "vehicle": dataclasses.asdict(cfg.vehicle),
        "expect_emergency": cfg.expect.emergency,
        "raceline_length": stack.raceline.total_length,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    records, _ = LogReader(run_dir, "main").read()
    metrics = compute_lap_metrics(records, raceline)
    topics = group_topics(records)
    verdicts = [
        _payload(r) for r in topics.get("verdict", []) if _payload(r)["action"] != 0
    ]
    faults = [_payload(r) for r in topics.get("faults", [])]

    metrics_doc = {
        "laps": [dataclasses.asdict(m) for m in metrics],
        "emergency_occurred": stack.emergency_occurred,
        "verdicts": verdicts,
        "fault_count": len(faults),
    }
    (run_dir / "metrics.json").write_text(json.dumps(metrics_doc, indent=1, sort_keys=True))
    _write_lap_csv(metrics, run_dir / "lap_metrics.csv")

    expected = cfg.expect.emergency
    ok = stack.emergency_occurred == expected
    return RunResult(
        run_dir=run_dir,
        metrics=metrics,
        emergency_occurred=stack.emergency_occurred,
        exit_code=0 if ok else 1,
        fault_messages=[f.get("message", "") for f in faults],
        verdicts=verdicts,
    )


def _write_lap_csv(metrics: list[LapMetrics], path: Path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        if not metrics:
            fh.write("")
            return
        names = [f.name for f in dataclasses.fields(LapMetrics)]
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        for m in metrics:
            writer.writerow(dataclasses.asdict(m))


def replay_metrics(run_dir: str | Path) -> tuple[list[LapMetrics], list[str]]:
    """Recompute lap metrics from the chunked log alone."""
    run_dir = Path(run_dir)
    raceline = load_raceline(run_dir / "raceline.csv")
    records, gaps = LogReader(run_dir, "main").read()
    return compute_lap_metrics(records, raceline), gaps
