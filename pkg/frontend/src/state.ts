// Console state: the latest frame, bounded history for plots, connection
// staleness, and threshold alerts.  Every displayed value traces back to a
// received frame field; nothing is fabricated client-side.

import { DashboardFrame, frameTime } from "./types.js";

export interface AlertRule {
  field: keyof DashboardFrame;
  label: string;
  min: number;
  max: number;
}

// cross-track limit mirrors the stack's 3.5 m stop threshold; the rest are
// actuator/command ranges
export const DEFAULT_ALERT_RULES: AlertRule[] = [
  { field: "cross_track_error", label: "cross-track error [m]", min: -3.5, max: 3.5 },
  { field: "heading_error", label: "heading error [rad]", min: -0.35, max: 0.35 },
  { field: "actual_throttle", label: "throttle [%]", min: 0, max: 55 },
  { field: "cmd_brake", label: "brake command [kPa]", min: 0, max: 1800 },
  { field: "actual_steering_degree", label: "steering [deg]", min: -230, max: 230 },
  { field: "trust", label: "localization trust", min: 0.5, max: 1.0 },
  { field: "engine_speed_rpm", label: "engine speed [rpm]", min: 0, max: 7200 },
];

export interface Alert {
  field: string;
  label: string;
  value: number;
  raisedAt: number;
}

export interface SeriesPoint {
  t: number;
  value: number;
}

export const DISCONNECT_AFTER_S = 1.0;

export class ConsoleState {
  latest: DashboardFrame | null = null;
  lastRxWallMs = -Infinity;
  frameCount = 0;
  decodeErrors = 0;
  alerts: Alert[] = [];
  series: Map<string, SeriesPoint[]> = new Map();
  trail: Array<{ x: number; y: number }> = [];

  constructor(
    private rules: AlertRule[] = DEFAULT_ALERT_RULES,
    private historyLength = 600,
  ) {}

  applyFrame(frame: DashboardFrame, wallMs: number): void {
    this.latest = frame;
    this.lastRxWallMs = wallMs;
    this.frameCount += 1;
    const t = frameTime(frame);
    for (const field of [
      "cross_track_error",
      "heading_error",
      "target_velocity_mps",
      "actual_velocity_mps",
      "actual_throttle",
      "actual_steering_degree",
    ] as const) {
      const arr = this.series.get(field) ?? [];
      arr.push({ t, value: frame[field] });
      if (arr.length > this.historyLength) arr.shift();
      this.series.set(field, arr);
    }
    this.trail.push({ x: frame.position_x, y: frame.position_y });
    if (this.trail.length > this.historyLength) this.trail.shift();
    this.alerts = this.evaluateAlerts(frame, t);
  }

  recordDecodeError(): void {
    this.decodeErrors += 1;
  }

  private evaluateAlerts(frame: DashboardFrame, t: number): Alert[] {
    const active: Alert[] = [];
    for (const rule of this.rules) {
      const value = frame[rule.field] as number;
      if (!Number.isFinite(value) || value < rule.min || value > rule.max) {
        const existing = this.alerts.find((a) => a.field === rule.field);
        active.push({
          field: String(rule.field),
          label: rule.label,
          value,
          raisedAt: existing ? existing.raisedAt : t,
        });
      }
    }
    return active;
  }

  connected(nowWallMs: number): boolean {
    return (nowWallMs - this.lastRxWallMs) / 1000 <= DISCONNECT_AFTER_S;
  }

  /** True when the disconnected banner must be showing. */
  disconnectedBanner(nowWallMs: number): boolean {
    return !this.connected(nowWallMs);
  }
}
