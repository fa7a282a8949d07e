// Pure view-model builders: everything the page shows comes through here,
// so the rendering layer stays a dumb template.

import { Alert, ConsoleState, SeriesPoint } from "./state.js";
import { DashboardFrame, frameTime } from "./types.js";

export interface FieldRow {
  name: string;
  value: string;
}

const MPS_TO_KMH = 3.6;

export function dashboardRows(frame: DashboardFrame): FieldRow[] {
  const f = (v: number, digits = 2) => v.toFixed(digits);
  return [
    { name: "stamp", value: `${frameTime(frame).toFixed(2)} s` },
    { name: "gear (cmd/actual)", value: `${frame.cmd_gear} / ${frame.actual_gear}` },
    { name: "throttle (cmd/actual)", value: `${frame.cmd_throttle} / ${frame.actual_throttle} %` },
    {
      name: "brake (cmd/front/rear)",
      value: `${frame.cmd_brake} / ${frame.actual_brake_front} / ${frame.actual_brake_rear} kPa`,
    },
    {
      name: "steering (cmd/actual)",
      value: `${frame.cmd_steering_degree} / ${frame.actual_steering_degree} deg`,
    },
    { name: "cross-track error", value: `${f(frame.cross_track_error)} m` },
    { name: "heading error", value: `${f((frame.heading_error * 180) / Math.PI)} deg` },
    { name: "velocity error", value: `${f(frame.velocity_error)} m/s` },
    {
      name: "velocity (target/actual)",
      value: `${f(frame.target_velocity_mps, 1)} / ${f(frame.actual_velocity_mps, 1)} m/s`,
    },
    { name: "speed", value: `${f(frame.vehicle_speed_kmph, 1)} km/h` },
    {
      name: "lookahead (dist/angle)",
      value: `${f(frame.purepursuit_lookahead_distance, 1)} m / ${f(frame.purepursuit_lookahead_angle_rad, 3)} rad`,
    },
    {
      name: "position",
      value: `(${f(frame.position_x, 1)}, ${f(frame.position_y, 1)}, ${f(frame.position_z, 1)})`,
    },
    {
      name: "attitude r/p/y",
      value: `${f(frame.position_r, 3)} / ${f(frame.position_p, 3)} / ${f(frame.position_yaw, 3)} rad`,
    },
    {
      name: "body velocity",
      value: `(${f(frame.velocity_x, 1)}, ${f(frame.velocity_y, 1)}, ${f(frame.velocity_z, 1)}) m/s`,
    },
    { name: "trust", value: f(frame.trust) },
    { name: "estimator status", value: statusLabel(frame.status) },
    { name: "engine", value: `${frame.engine_speed_rpm.toFixed(0)} rpm` },
  ];
}

export function statusLabel(status: number): string {
  return ["OK", "DEAD_RECKONING", "REINITIALIZING", "FAILED"][status] ?? `#${status}`;
}

export interface PlotModel {
  label: string;
  points: SeriesPoint[];
  yMin: number;
  yMax: number;
  thresholds: number[];
}

export function crossTrackPlot(state: ConsoleState): PlotModel {
  return {
    label: "cross-track error [m]",
    points: state.series.get("cross_track_error") ?? [],
    yMin: -4,
    yMax: 4,
    thresholds: [-3.5, 3.5], // stack stop limit drawn on the plot
  };
}

export function velocityPlot(state: ConsoleState): PlotModel {
  const target = state.series.get("target_velocity_mps") ?? [];
  const actual = state.series.get("actual_velocity_mps") ?? [];
  const all = target.concat(actual).map((p) => p.value);
  const top = all.length ? Math.max(...all) : 60;
  return {
    label: "velocity target/actual [m/s]",
    points: actual,
    yMin: 0,
    yMax: Math.max(10, top * 1.15),
    thresholds: [],
  };
}

export function alertLines(alerts: Alert[]): string[] {
  return alerts.map(
    (a) => `${a.label}: ${Number.isFinite(a.value) ? a.value.toFixed(2) : "not finite"}`,
  );
}
