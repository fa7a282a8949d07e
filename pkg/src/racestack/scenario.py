"""Scenario configuration: TOML files with nested sections, loaded into
typed dataclasses with path-qualified error reporting."""
from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .controller import ControlParams
from .estimator import EskfConfig
from .planner import PlannerConfig
from .track import VelocityProfileParams
from .vehicle import FaultInjection, SensorNoise, VehicleParams


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class TrackConfig:
    kind: str = "oval"  # oval | annulus | straight | file
    file: str = ""
    format: str = "csv"
    spacing: float = 2.0
    smooth_window: int = 1
    # oval parameters
    straight_long: float = 1006.0
    straight_short: float = 201.0
    corner_radius: float = 256.0
    width: float = 15.24
    bank_deg: float = 9.2
    # annulus / straight parameters
    r_inner: float = 40.0
    r_outer: float = 50.0
    length: float = 800.0


@dataclass(frozen=True)
class RacelineConfig:
    file: str = ""  # prebuilt raceline CSV; empty means build from track
    margin: float = 1.5
    a_lat_max: float = 18.0
    a_lon_accel_max: float = 2.0
    a_lon_brake_max: float = 10.0
    v_cap: float = 60.0

    def velocity_params(self) -> VelocityProfileParams:
        return VelocityProfileParams(
            a_lat_max=self.a_lat_max,
            a_lon_accel_max=self.a_lon_accel_max,
            a_lon_brake_max=self.a_lon_brake_max,
            v_cap=self.v_cap,
        )


@dataclass(frozen=True)
class InitConfig:
    station: float = -200.0  # starting arc length relative to the line (m)
    speed: float = 45.0
    cross_track: float = 0.0


@dataclass(frozen=True)
class RemoteConfig:
    lap_caps: tuple[float, ...] = (50.0, 53.0, 56.0)
    rate_hz: float = 10.0
    # (time, flag) schedules; flags by value of TrackFlag / VehFlag
    track_flag_schedule: tuple[tuple[float, int], ...] = ()
    veh_flag_schedule: tuple[tuple[float, int], ...] = ()
    joystick_override_at: float = -1.0  # < 0: never
    joystick_brake: float = 0.0
    joystick_steering: float = 0.0


@dataclass(frozen=True)
class FaultConfig:
    counter_freeze_t0: float = -1.0
    counter_freeze_duration: float = 0.0
    rtk_dropout_t0: float = -1.0
    rtk_dropout_t1: float = -1.0
    actuator_fault: str = ""

    def to_injection(self) -> FaultInjection:
        inj = FaultInjection()
        if self.counter_freeze_t0 >= 0 and self.counter_freeze_duration > 0:
            inj.counter_freezes.append(
                (self.counter_freeze_t0, self.counter_freeze_t0 + self.counter_freeze_duration)
            )
        if 0 <= self.rtk_dropout_t0 < self.rtk_dropout_t1:
            inj.rtk_dropouts.append((self.rtk_dropout_t0, self.rtk_dropout_t1))
        if self.actuator_fault:
            inj.actuator_faults.add(self.actuator_fault)
        return inj


@dataclass(frozen=True)
class LoggingConfig:
    chunk_budget: int = 16 * 1024 * 1024
    plant_decimation: int = 10  # plant truth logged every Nth 500 Hz step


@dataclass(frozen=True)
class ExpectConfig:
    emergency: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    duration_s: float = 60.0
    track: TrackConfig = TrackConfig()
    raceline: RacelineConfig = RacelineConfig()
    vehicle: VehicleParams = VehicleParams()
    noise: SensorNoise = dataclasses.field(default_factory=SensorNoise)
    estimator: EskfConfig = EskfConfig()
    planner: PlannerConfig = PlannerConfig()
    control: ControlParams = ControlParams()
    init: InitConfig = InitConfig()
    remote: RemoteConfig = RemoteConfig()
    faults: FaultConfig = FaultConfig()
    logging: LoggingConfig = LoggingConfig()
    expect: ExpectConfig = ExpectConfig()


_SECTION_TYPES = {
    "track": TrackConfig,
    "raceline": RacelineConfig,
    "vehicle": VehicleParams,
    "noise": SensorNoise,
    "estimator": EskfConfig,
    "planner": PlannerConfig,
    "control": ControlParams,
    "init": InitConfig,
    "remote": RemoteConfig,
    "faults": FaultConfig,
    "logging": LoggingConfig,
    "expect": ExpectConfig,
}

_SCALAR_KEYS = {"name", "seed", "duration_s"}


def _coerce(cls, data: dict, path: str):
    valid = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in valid:
            raise ConfigError(f"unknown key '{path}.{key}'")
        f = valid[key]
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    try:
        base = cls()
    except TypeError as exc:
        raise ConfigError(f"section '{path}': {exc}") from exc
    try:
        return replace(base, **kwargs) if kwargs else base
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{path}': {exc}") from exc


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return scenario_from_dict(raw, str(path))


def scenario_from_dict(raw: dict, origin: str = "<dict>") -> ScenarioConfig:
    kwargs = {}
    for key, value in raw.items():
        if key in _SCALAR_KEYS:
            kwargs[key] = value
        elif key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"section '{key}' must be a table")
            kwargs[key] = _coerce(_SECTION_TYPES[key], value, key)
        else:
            raise ConfigError(f"unknown section or key '{key}' in {origin}")
    cfg = ScenarioConfig(**kwargs)
    if cfg.duration_s <= 0:
        raise ConfigError("duration_s must be positive")
    return cfg
