// Command drafting and validation: commands go out only on explicit
// operator action, and speed-cap changes are limited to fixed increments.

import { BasestationCommand, TrackFlag, VehFlag } from "./types.js";

export const V_MAX_INCREMENT = 1.0; // m/s per click
export const V_MAX_LIMIT = 80.0;

export interface CommandDraft {
  vMax: number;
  racelineIndex: number;
  trackFlag: number;
  vehFlag: number;
  joystickOn: boolean;
  joystickSteering: number; // hand-wheel degrees
  joystickBrake: number; // kPa
}

export function initialDraft(): CommandDraft {
  return {
    vMax: 0,
    racelineIndex: 0,
    trackFlag: TrackFlag.GREEN,
    vehFlag: VehFlag.NONE,
    joystickOn: false,
    joystickSteering: 0,
    joystickBrake: 0,
  };
}

/** Step the speed cap; anything beyond one increment is rejected client-side. */
export function stepVMax(draft: CommandDraft, delta: number): CommandDraft {
  if (Math.abs(delta) > V_MAX_INCREMENT + 1e-9) {
    throw new Error(
      `v_max steps are limited to ${V_MAX_INCREMENT} m/s (got ${delta})`,
    );
  }
  const next = Math.min(Math.max(draft.vMax + delta, 0), V_MAX_LIMIT);
  return { ...draft, vMax: next };
}

export function validateDraft(draft: CommandDraft): string[] {
  const problems: string[] = [];
  if (draft.vMax < 0 || draft.vMax > V_MAX_LIMIT) problems.push("v_max out of range");
  if (![0, 1, 2].includes(draft.trackFlag)) problems.push("unknown track flag");
  if (![0, 1, 2, 3].includes(draft.vehFlag)) problems.push("unknown vehicle flag");
  if (Math.abs(draft.joystickSteering) > 230) problems.push("joystick steering beyond 230 deg");
  if (draft.joystickBrake < 0 || draft.joystickBrake > 1800) {
    problems.push("joystick brake beyond 1800 kPa");
  }
  return problems;
}

export function buildCommand(draft: CommandDraft, nowSeconds: number): BasestationCommand {
  const problems = validateDraft(draft);
  if (problems.length) throw new Error(problems.join("; "));
  const sec = Math.floor(nowSeconds);
  return {
    stamp_sec: sec,
    stamp_nsec: Math.round((nowSeconds - sec) * 1e9),
    v_max: draft.vMax,
    raceline_index: draft.racelineIndex,
    veh_flag: draft.vehFlag,
    track_flag: draft.trackFlag,
    enable_engine: true,
    enable_driving: true,
    enable_joystick_control: draft.joystickOn,
    target_velocity: 0,
    steering_cmd: draft.joystickOn ? draft.joystickSteering : 0,
    brake_amount: draft.joystickOn ? draft.joystickBrake : 0,
    throttle_lockout: false,
  };
}
