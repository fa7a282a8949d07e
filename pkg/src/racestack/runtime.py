"""Deterministic publish-subscribe bus, virtual clock, and rate scheduler.

Simulated time is an integer tick counter (1 ms base period by default) so
task rates like 500/125/50/20/10 Hz never drift against each other.  In
lockstep mode tasks due at the same tick run in lexicographic name order,
which is how the stack pins its estimator -> planner -> controller ordering
(task names carry numeric prefixes).
"""
from __future__ import annotations

import heapq
import time
import zlib
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable

import numpy as np


class ConfigurationError(Exception):
    """Invalid bus/scheduler setup (duplicate writer, bad period, ...)."""


def _as_fraction(seconds: float | int | str | Fraction) -> Fraction:
    if isinstance(seconds, Fraction):
        return seconds
    if isinstance(seconds, int):
        return Fraction(seconds)
    # going through str keeps 0.02 == 1/50 exact instead of the float bits
    return Fraction(str(seconds))


class SimClock:
    """Monotonic virtual clock counting integer base ticks."""

    def __init__(self, base_tick: float | Fraction = Fraction(1, 1000)):
        self.base_tick = _as_fraction(base_tick)
        if self.base_tick <= 0:
            raise ConfigurationError("base_tick must be positive")
        self._base_float = float(self.base_tick)
        self.ticks = 0

    @property
    def now(self) -> float:
        return self.ticks * self._base_float

    @property
    def now_exact(self) -> Fraction:
        return self.ticks * self.base_tick

    def seconds_to_ticks(self, seconds: float | Fraction, what: str = "interval") -> int:
        frac = _as_fraction(seconds) / self.base_tick
        if frac.denominator != 1:
            raise ConfigurationError(
                f"{what} {seconds} s is not an integer multiple of the "
                f"{float(self.base_tick)} s base tick"
            )
        return int(frac)


@dataclass(frozen=True)
class Stamped:
    """A published value with its publish tick."""

    value: Any
    tick: int
    time: float


@dataclass(frozen=True)
class FaultEvent:
    source: str
    tick: int
    message: str


FAULT_TOPIC = "faults"


class Bus:
    """Single-writer topics with latest-value reads and a bounded history."""

    def __init__(self, clock: SimClock):
        self.clock = clock
        self._writers: dict[str, str] = {}
        self._latest: dict[str, Stamped] = {}
        self._history: dict[str, deque[Stamped]] = {}
        self._depth: dict[str, int] = {}
        self._publish_hooks: list[Callable[[str, Stamped], None]] = []
        self.advertise(FAULT_TOPIC, writer="runtime", depth=256)

    def advertise(self, topic: str, writer: str, depth: int = 16) -> None:
        if topic in self._writers:
            raise ConfigurationError(
                f"topic {topic!r} already has writer {self._writers[topic]!r}"
            )
        self._writers[topic] = writer
        self._history[topic] = deque(maxlen=depth)
        self._depth[topic] = depth

    def publish(self, topic: str, value: Any, writer: str) -> Stamped:
        owner = self._writers.get(topic)
        if owner is None:
            raise ConfigurationError(f"topic {topic!r} was never advertised")
        if owner != writer:
            raise ConfigurationError(
                f"topic {topic!r} is owned by {owner!r}, not {writer!r}"
            )
        rec = Stamped(value=value, tick=self.clock.ticks, time=self.clock.now)
        self._latest[topic] = rec
        self._history[topic].append(rec)
        for hook in self._publish_hooks:
            hook(topic, rec)
        return rec

    def latest(self, topic: str) -> Stamped | None:
        return self._latest.get(topic)

    def history(self, topic: str) -> tuple[Stamped, ...]:
        return tuple(self._history.get(topic, ()))

    def add_publish_hook(self, hook: Callable[[str, Stamped], None]) -> None:
        self._publish_hooks.append(hook)

    def publish_fault(self, source: str, message: str) -> None:
        self.publish(
            FAULT_TOPIC,
            FaultEvent(source=source, tick=self.clock.ticks, message=message),
            writer="runtime",
        )


@dataclass
class TaskSpec:
    name: str
    period_ticks: int
    phase_ticks: int
    callback: Callable[[], None]
    fired: int = 0

    def next_fire(self) -> int:
        return self.phase_ticks + (self.fired + 1) * self.period_ticks


class Scheduler:
    """Lockstep rate scheduler.

    Tasks fire at phase + k*period for k = 1, 2, ...; ties at a tick resolve
    lexicographically by task name.  Callback exceptions become fault events
    on the shared fault topic and never abort the loop.
    """

    def __init__(self, base_tick: float | Fraction = Fraction(1, 1000)):
        self.clock = SimClock(base_tick)
        self.bus = Bus(self.clock)
        self._tasks: dict[str, TaskSpec] = {}
        self._heap: list[tuple[int, str]] = []

    def add_task(
        self,
        name: str,
        period_s: float | Fraction,
        callback: Callable[[], None],
        phase_s: float | Fraction = 0,
    ) -> None:
        if name in self._tasks:
            raise ConfigurationError(f"duplicate task name {name!r}")
        period = self.clock.seconds_to_ticks(period_s, f"task {name!r} period")
        if period <= 0:
            raise ConfigurationError(f"task {name!r} period must be positive")
        phase = self.clock.seconds_to_ticks(phase_s, f"task {name!r} phase")
        spec = TaskSpec(name=name, period_ticks=period, phase_ticks=phase, callback=callback)
        self._tasks[name] = spec
        heapq.heappush(self._heap, (spec.next_fire(), name))

    def advance_by(self, duration_s: float | Fraction) -> list[tuple[str, int]]:
        ticks = self.clock.seconds_to_ticks(duration_s, "advance duration")
        return self.advance((self.clock.ticks + ticks) * self.clock.base_tick)

    def advance(self, until_s: float | Fraction) -> list[tuple[str, int]]:
        until = self.clock.seconds_to_ticks(until_s, "advance target")
        if until < self.clock.ticks:
            raise ConfigurationError("cannot advance the clock backwards")
        executed: list[tuple[str, int]] = []
        while self._heap and self._heap[0][0] <= until:
            tick, name = heapq.heappop(self._heap)
            spec = self._tasks[name]
            self.clock.ticks = tick
            try:
                spec.callback()
            except Exception as exc:  # noqa: BLE001 - fault isolation by design
                self.bus.publish_fault(name, f"{type(exc).__name__}: {exc}")
            spec.fired += 1
            executed.append((name, tick))
            heapq.heappush(self._heap, (spec.next_fire(), name))
        self.clock.ticks = until
        return executed

    def run_wallclock(
        self, duration_s: float, sleep: Callable[[float], None] = time.sleep
    ) -> None:
        """Drive the same task set against the wall clock (live demo mode)."""
        start = time.monotonic()
        entry_tick = self.clock.ticks
        horizon = self.clock.seconds_to_ticks(duration_s, "duration")
        end_tick = entry_tick + horizon
        while self._heap and self._heap[0][0] <= end_tick:
            next_tick = self._heap[0][0]
            target = start + (next_tick - entry_tick) * self.clock._base_float
            delay = target - time.monotonic()
            if delay > 0:
                sleep(delay)
            self.advance(next_tick * self.clock.base_tick)


class RngPool:
    """One seeded counter-based generator per named noise source.

    Streams are keyed by (seed, crc32(name)) into Philox so adding a sensor
    never perturbs the draws of existing ones.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            key = (self.seed << 32) ^ zlib.crc32(name.encode())
            gen = np.random.Generator(np.random.Philox(key=key))
            self._streams[name] = gen
        return gen
