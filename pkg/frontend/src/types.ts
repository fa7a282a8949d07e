// Field names mirror the telemetry bridge JSON exactly.

export interface DashboardFrame {
  stamp_sec: number;
  stamp_nsec: number;
  cmd_gear: number;
  actual_gear: number;
  cmd_throttle: number;
  actual_throttle: number;
  cmd_brake: number;
  actual_brake_front: number;
  actual_brake_rear: number;
  cmd_steering_degree: number;
  actual_steering_degree: number;
  heading_error: number;
  cross_track_error: number;
  velocity_error: number;
  target_velocity_mps: number;
  actual_velocity_mps: number;
  purepursuit_lookahead_distance: number;
  purepursuit_lookahead_angle_rad: number;
  position_x: number;
  position_y: number;
  position_z: number;
  position_r: number;
  position_p: number;
  position_yaw: number;
  velocity_x: number;
  velocity_y: number;
  velocity_z: number;
  trust: number;
  status: number;
  engine_speed_rpm: number;
  vehicle_speed_kmph: number;
}

export interface BasestationCommand {
  stamp_sec: number;
  stamp_nsec: number;
  v_max: number;
  raceline_index: number;
  veh_flag: number;
  track_flag: number;
  enable_engine: boolean;
  enable_driving: boolean;
  enable_joystick_control: boolean;
  target_velocity: number;
  steering_cmd: number;
  brake_amount: number;
  throttle_lockout: boolean;
}

export const TrackFlag = { GREEN: 0, YELLOW: 1, RED: 2 } as const;
export const VehFlag = { NONE: 0, START_ENGINE: 1, PIT: 2, STOP: 3 } as const;

export function frameTime(frame: DashboardFrame): number {
  return frame.stamp_sec + frame.stamp_nsec * 1e-9;
}

export const MPH_80_IN_MPS = 80 * 0.44704;
