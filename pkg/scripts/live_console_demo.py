#!/usr/bin/env python3
"""Wall-clock run with the NDJSON console bridge enabled, for driving the
operator console (frontend/) against live telemetry.

The bridge serves newline-delimited JSON dashboard frames on a local TCP
port and accepts basestation-field command objects back.
"""
import argparse
from pathlib import Path

from racestack.scenario import load_scenario
from racestack.stack import RacingStack
from racestack.telemetry import NdjsonBridgeServer

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scenario", default=str(ROOT / "scenarios/oval_3laps.toml"))
    ap.add_argument("--port", type=int, default=7780)
    ap.add_argument("--duration", type=float, default=0.0, help="override scenario duration")
    args = ap.parse_args()

    cfg = load_scenario(args.scenario)
    bridge = NdjsonBridgeServer(port=args.port)
    print(f"console bridge listening on {bridge.host}:{bridge.port}")
    stack = RacingStack(cfg, run_dir=Path("runs/live"), bridge=bridge)
    try:
        stack.sched.run_wallclock(args.duration or cfg.duration_s)
    except KeyboardInterrupt:
        print("interrupted")
    finally:
        stack.close()
        bridge.close()


if __name__ == "__main__":
    main()
