#!/usr/bin/env python3
"""Three flying laps on the speedway oval with per-lap caps 50/53/56 m/s.

Prints the per-lap tracking table and exports the cross-track / heading /
velocity error time series to CSV for plotting.
"""
import argparse
import csv
import json
import math
from pathlib import Path

from racestack import analysis
from racestack.scenario import load_scenario
from racestack.telemetry import LogReader

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/oval_3laps")
    ap.add_argument("--scenario", default=str(ROOT / "scenarios/oval_3laps.toml"))
    args = ap.parse_args()

    cfg = load_scenario(args.scenario)
    result = analysis.run_scenario(cfg, args.out)

    print(f"{'lap':>3} {'time':>7} {'v_mean':>7} {'cross-track [m]':>18} "
          f"{'heading err [deg]':>20} {'dv straights':>12}")
    for m in result.metrics:
        print(
            f"{m.lap:>3} {m.lap_time:>6.1f}s {m.mean_speed:>6.1f}  "
            f"[{m.cross_track_min:+.2f}, {m.cross_track_max:+.2f}] rms {m.cross_track_rms:.2f}  "
            f"[{math.degrees(m.heading_error_min):+.2f}, {math.degrees(m.heading_error_max):+.2f}]  "
            f"{m.velocity_error_mean_straights:>8.2f} m/s"
        )
    print(f"verdicts: {len(result.verdicts)}  emergency: {result.emergency_occurred}")

    records, _ = LogReader(Path(args.out), "main").read()
    series_path = Path(args.out) / "error_series.csv"
    with open(series_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "cross_track", "heading_error", "v_cap"])
        for rec in records:
            if rec.topic == "tracking":
                d = json.loads(rec.payload)
                w.writerow([rec.stamp_ticks * 1e-3, d["cross_track"], d["heading_error"], d["v_cap"]])
    print(f"error time series -> {series_path}")
    return result.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
