#!/usr/bin/env python3
"""Constant-radius circle runs at stepped speed caps: exports the
acceleration envelope (a_lon vs a_lat) and the front lateral force vs slip
angle dataset, and prints the fitted cornering stiffness."""
import argparse
import json
from pathlib import Path

import numpy as np

from racestack import analysis
from racestack.scenario import load_scenario
from racestack.telemetry import LogReader

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/dynamics_circle")
    ap.add_argument("--scenario", default=str(ROOT / "scenarios/dynamics_circle.toml"))
    args = ap.parse_args()

    cfg = load_scenario(args.scenario)
    result = analysis.run_scenario(cfg, args.out)
    records, _ = LogReader(Path(args.out), "main").read()
    manifest = json.loads((Path(args.out) / "manifest.json").read_text())
    rows = analysis.export_dynamics(records, manifest["vehicle"])
    out_csv = Path(args.out) / "dynamics.csv"
    analysis.write_dynamics_csv(rows, out_csv)

    settled = [r for r in rows if r["t"] > 8.0]
    a_lat = np.array([r["a_lat"] for r in settled])
    v = np.array([r["v"] for r in settled])
    sig = np.array([r["sigma_f"] for r in settled])
    fyf = np.array([r["f_yf"] for r in settled])
    print(f"{len(rows)} samples -> {out_csv}")
    print(f"peak lateral acceleration (p99): {np.percentile(np.abs(a_lat), 99):.1f} m/s^2")
    print(f"speed range: {v.min():.1f} .. {v.max():.1f} m/s")
    mx, my = [], []
    for lo in np.arange(8.0, 34.0, 2.0):
        m = (v >= lo) & (v < lo + 2.0)
        if m.sum() >= 200:
            mx.append(sig[m].mean())
            my.append(fyf[m].mean())
    slope = float(np.polyfit(mx, my, 1)[0])
    print(f"front cornering stiffness fit: {slope:,.0f} N/rad "
          f"(configured {manifest['vehicle']['c_f']:,.0f})")
    return result.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
