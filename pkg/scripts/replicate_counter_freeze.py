#!/usr/bin/env python3
"""Replicates the middleware-freeze failure: the rolling counter stalls at
corner exit, the low-level watchdog latches emergency braking, and the car
stops with steering held.  Prints the logged event sequence."""
import argparse
import json
from pathlib import Path

from racestack import analysis
from racestack.scenario import load_scenario
from racestack.telemetry import LogReader

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/crash_counter_freeze")
    ap.add_argument("--scenario", default=str(ROOT / "scenarios/crash_counter_freeze.toml"))
    args = ap.parse_args()

    cfg = load_scenario(args.scenario)
    result = analysis.run_scenario(cfg, args.out)
    records, _ = LogReader(Path(args.out), "main").read()

    freeze_t0 = cfg.faults.counter_freeze_t0
    print(f"counter frozen at t={freeze_t0:.1f} s for {cfg.faults.counter_freeze_duration:.2f} s")
    shown_em = False
    last = None
    for rec in records:
        t = rec.stamp_ticks * 1e-3
        if rec.topic == "faults":
            d = json.loads(rec.payload)
            print(f"t={t:7.3f}  fault: {d['message']}")
        elif rec.topic == "plant_state":
            d = json.loads(rec.payload)
            if d["lowlevel"] == 5 and not shown_em:
                print(f"t={t:7.3f}  state machine -> EMERGENCY")
                shown_em = True
            if shown_em and (last is None or t - last >= 0.5):
                print(
                    f"t={t:7.3f}  throttle {d['throttle_actual']:4.1f}%  "
                    f"brake {d['brake_front'] + d['brake_rear']:6.0f} kPa  "
                    f"steer {d['steering_actual_deg']:+6.1f} deg  "
                    f"rpm {d['engine_rpm']:6.0f}  v {d['v_x']:5.1f} m/s"
                )
                last = t
    print(f"emergency occurred: {result.emergency_occurred} (expected: {cfg.expect.emergency})")
    return result.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
