"""Command-line entry points: run scenarios, recompute metrics, export
dynamics datasets, replay logs, and build racelines from boundary files."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path


def cmd_run(args) -> int:
    from .analysis import run_scenario
    from .scenario import ConfigError, load_scenario

    try:
        cfg = load_scenario(args.scenario)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    run_dir = Path(args.out or f"runs/{cfg.name}_seed{cfg.seed}")
    if args.wallclock:
        return _run_wallclock(cfg, run_dir, args)
    result = run_scenario(cfg, run_dir)
    for m in result.metrics:
        print(
            f"lap {m.lap}: time {m.lap_time:.1f} s  mean v {m.mean_speed:.1f} m/s  "
            f"cross-track [{m.cross_track_min:+.2f}, {m.cross_track_max:+.2f}] m  "
            f"velocity err (straights) {m.velocity_error_mean_straights:.2f} m/s"
        )
    print(f"emergency: {result.emergency_occurred}  verdicts: {len(result.verdicts)}")
    print(f"artifacts: {result.run_dir}")
    return result.exit_code


def _run_wallclock(cfg, run_dir, args) -> int:
    from .stack import RacingStack
    from .telemetry import NdjsonBridgeServer

    bridge = None
    if args.bridge_port:
        bridge = NdjsonBridgeServer(port=args.bridge_port)
        print(f"console bridge on {bridge.host}:{bridge.port}")
    run_dir.mkdir(parents=True, exist_ok=True)
    stack = RacingStack(cfg, run_dir=run_dir, bridge=bridge)
    try:
        stack.sched.run_wallclock(cfg.duration_s)
    except KeyboardInterrupt:
        pass
    finally:
        stack.close()
        if bridge:
            bridge.close()
    return 0


def cmd_metrics(args) -> int:
    from .analysis import replay_metrics

    metrics, gaps = replay_metrics(args.run_dir)
    for g in gaps:
        print(f"gap: {g}", file=sys.stderr)
    print(json.dumps([dataclasses.asdict(m) for m in metrics], indent=1))
    return 0


def cmd_dynamics(args) -> int:
    from .analysis import export_dynamics, write_dynamics_csv
    from .telemetry import LogReader

    run_dir = Path(args.run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    records, gaps = LogReader(run_dir, "main").read()
    for g in gaps:
        print(f"gap: {g}", file=sys.stderr)
    rows = export_dynamics(records, manifest["vehicle"])
    out = run_dir / "dynamics.csv"
    write_dynamics_csv(rows, out)
    if rows:
        a_lat_max = max(abs(r["a_lat"]) for r in rows)
        print(f"{len(rows)} samples, max |a_lat| {a_lat_max:.1f} m/s^2 -> {out}")
    return 0


def cmd_replay(args) -> int:
    from .analysis import replay_metrics

    run_dir = Path(args.run_dir)
    metrics, gaps = replay_metrics(run_dir)
    for g in gaps:
        print(f"gap: {g}", file=sys.stderr)
    live = json.loads((run_dir / "metrics.json").read_text())["laps"]
    replayed = [dataclasses.asdict(m) for m in metrics]
    if replayed == live:
        print(f"replay identical: {len(metrics)} laps")
        return 0
    print("replay differs from live metrics", file=sys.stderr)
    return 1


def cmd_raceline(args) -> int:
    from . import track

    boundaries = track.load_boundaries(args.boundaries, fmt=args.format)
    raceline = track.build_raceline(
        boundaries,
        margin=args.margin,
        smooth_window=args.smooth_window,
    )
    track.save_raceline(raceline, args.out)
    print(f"raceline: {len(raceline.samples)} samples, {raceline.total_length:.1f} m -> {args.out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="racestack")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario end to end")
    p_run.add_argument("scenario", help="scenario TOML file")
    p_run.add_argument("--out", help="run directory (default runs/<name>_seed<seed>)")
    p_run.add_argument("--wallclock", action="store_true", help="real-time mode")
    p_run.add_argument("--bridge-port", type=int, default=0, help="NDJSON console bridge port")
    p_run.set_defaults(func=cmd_run)

    p_metrics = sub.add_parser("metrics", help="recompute lap metrics from a run log")
    p_metrics.add_argument("run_dir")
    p_metrics.set_defaults(func=cmd_metrics)

    p_dyn = sub.add_parser("dynamics", help="export acceleration/slip dataset")
    p_dyn.add_argument("run_dir")
    p_dyn.set_defaults(func=cmd_dynamics)

    p_replay = sub.add_parser("replay", help="verify metrics reproduce from the log")
    p_replay.add_argument("run_dir")
    p_replay.set_defaults(func=cmd_replay)

    p_rl = sub.add_parser("raceline", help="build a raceline from boundary files")
    p_rl.add_argument("boundaries")
    p_rl.add_argument("--format", choices=["kml", "csv"], default=None)
    p_rl.add_argument("--margin", type=float, default=1.5)
    p_rl.add_argument("--smooth-window", type=int, default=5)
    p_rl.add_argument("--out", default="raceline.csv")
    p_rl.set_defaults(func=cmd_raceline)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
