"""Device state traces and training-availability intervals.

A trace is a sorted list of full state snapshots for one device.  The state
recorded at ``t`` stays in force until the next entry (or the horizon).  A
device is available for training while that state satisfies a
:class:`StateCriteria`.
"""

from __future__ import annotations

import bisect
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyFile, InvalidSpec, MalformedEntry, UnsortedTimestamps

WEEK = 7 * 24 * 3600

SCREEN_STATES = ("on", "off")
LOCK_STATES = ("locked", "unlocked")
NETWORK_STATES = ("wifi", "2g", "3g", "4g", "5g", "none")


@dataclass(frozen=True, slots=True)
class StateEntry:
    device_id: str
    timestamp: int
    screen: str
    screen_lock: str
    network: str
    battery_charging: bool
    battery_level: float

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")
        if self.screen not in SCREEN_STATES:
            raise ValueError(f"bad screen state {self.screen!r}")
        if self.screen_lock not in LOCK_STATES:
            raise ValueError(f"bad lock state {self.screen_lock!r}")
        if self.network not in NETWORK_STATES:
            raise ValueError(f"bad network state {self.network!r}")
        if not 0.0 <= self.battery_level <= 100.0:
            raise ValueError(f"battery level {self.battery_level} outside [0, 100]")

    @property
    def idle(self) -> bool:
        return self.screen == "off" or self.screen_lock == "locked"

    def to_record(self) -> dict:
        return {
            "device": self.device_id,
            "t": self.timestamp,
            "screen": self.screen,
            "lock": self.screen_lock,
            "net": self.network,
            "charging": self.battery_charging,
            "level": self.battery_level,
        }


@dataclass(frozen=True)
class StateTrace:
    device_id: str
    entries: tuple[StateEntry, ...]
    horizon: int = WEEK

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise ValueError(f"trace for {self.device_id!r} has no entries")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        prev = -1
        for e in self.entries:
            if e.device_id != self.device_id:
                raise ValueError(f"entry for {e.device_id!r} in trace of {self.device_id!r}")
            if e.timestamp <= prev:
                raise UnsortedTimestamps(self.device_id)
            prev = e.timestamp

    @cached_property
    def timestamps(self) -> list[int]:
        return [e.timestamp for e in self.entries]

    def state_at(self, t: int) -> StateEntry | None:
        """Entry in force at ``t``, or None before the first entry."""
        i = bisect.bisect_right(self.timestamps, t) - 1
        return self.entries[i] if i >= 0 else None


@dataclass(frozen=True)
class StateCriteria:
    require_charging: bool = True
    require_wifi: bool = True
    require_idle: bool = True
    min_battery_level: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.min_battery_level <= 100.0:
            raise ValueError("min_battery_level must lie in [0, 100]")

    def violations(self, entry: StateEntry | None) -> set[str]:
        """Names of the criteria ``entry`` fails: idle, charging, battery, wifi."""
        if entry is None:
            return {"no_state"}
        out = set()
        if self.require_idle and not entry.idle:
            out.add("idle")
        if self.require_charging and not entry.battery_charging:
            out.add("charging")
        if entry.battery_level < self.min_battery_level:
            out.add("battery")
        if self.require_wifi and entry.network != "wifi":
            out.add("wifi")
        return out

    def satisfied(self, entry: StateEntry | None) -> bool:
        return not self.violations(entry)


@dataclass(frozen=True)
class AvailabilityTimeline:
    intervals: tuple[tuple[int, int], ...]
    horizon: int

    def __post_init__(self):
        object.__setattr__(self, "intervals", tuple((int(a), int(b)) for a, b in self.intervals))
        prev_end = None
        for a, b in self.intervals:
            if not 0 <= a < b <= self.horizon:
                raise ValueError(f"bad interval [{a}, {b}) for horizon {self.horizon}")
            if prev_end is not None and a <= prev_end:
                raise ValueError("intervals must be sorted, disjoint and non-adjacent")
            prev_end = b

    @cached_property
    def starts(self) -> list[int]:
        return [a for a, _ in self.intervals]

    def total(self) -> int:
        return sum(b - a for a, b in self.intervals)

    def interval_at(self, t: int) -> tuple[int, int] | None:
        i = bisect.bisect_right(self.starts, t) - 1
        if i >= 0 and t < self.intervals[i][1]:
            return self.intervals[i]
        return None


def ideal_trace(device_id: str, horizon: int = WEEK) -> StateTrace:
    """A trace that satisfies every criterion from t=0 to the horizon."""
    entry = StateEntry(device_id, 0, "off", "locked", "wifi", True, 100.0)
    return StateTrace(device_id, (entry,), horizon)


def availability(trace: StateTrace, criteria: StateCriteria) -> AvailabilityTimeline:
    intervals: list[list[int]] = []
    entries = [e for e in trace.entries if e.timestamp < trace.horizon]
    for i, e in enumerate(entries):
        if not criteria.satisfied(e):
            continue
        start = e.timestamp
        end = entries[i + 1].timestamp if i + 1 < len(entries) else trace.horizon
        if intervals and intervals[-1][1] == start:
            intervals[-1][1] = end
        else:
            intervals.append([start, end])
    return AvailabilityTimeline(tuple(map(tuple, intervals)), trace.horizon)


def is_available(timeline: AvailabilityTimeline, t: int) -> bool:
    return timeline.interval_at(t) is not None


def next_state_violation(trace: StateTrace, criteria: StateCriteria, from_t: int) -> int | None:
    """Earliest ``t >= from_t`` at which the device is unavailable.

    Returns None when the device stays available through the horizon.
    """
    timeline = availability(trace, criteria)
    iv = timeline.interval_at(from_t)
    if iv is None:
        return from_t if from_t < trace.horizon else None
    return None if iv[1] >= trace.horizon else iv[1]


def interruption_cause(trace: StateTrace, criteria: StateCriteria, t: int) -> str:
    """Map the criterion violated at ``t`` to an interruption sub-cause.

    Several simultaneous violations resolve as user_interaction, then
    battery_off, then network_change.
    """
    bad = criteria.violations(trace.state_at(t))
    if "idle" in bad:
        return "user_interaction"
    if "charging" in bad or "battery" in bad:
        return "battery_off"
    return "network_change"


# -- file format -----------------------------------------------------------

_REQUIRED_KEYS = ("device", "t", "screen", "lock", "net", "charging", "level")


def _entry_from_record(rec: dict, line_no: int) -> StateEntry:
    if not isinstance(rec, dict):
        raise MalformedEntry(line_no, "record is not a JSON object")
    missing = [k for k in _REQUIRED_KEYS if k not in rec]
    if missing:
        raise MalformedEntry(line_no, f"missing keys {missing}")
    extra = set(rec) - set(_REQUIRED_KEYS)
    if extra:
        raise MalformedEntry(line_no, f"unknown keys {sorted(extra)}")
    t = rec["t"]
    if isinstance(t, bool) or not isinstance(t, int):
        raise MalformedEntry(line_no, "t must be an integer")
    if not isinstance(rec["charging"], bool):
        raise MalformedEntry(line_no, "charging must be a boolean")
    level = rec["level"]
    if isinstance(level, bool) or not isinstance(level, (int, float)):
        raise MalformedEntry(line_no, "level must be a number")
    if not isinstance(rec["device"], str) or not rec["device"]:
        raise MalformedEntry(line_no, "device must be a non-empty string")
    try:
        return StateEntry(
            rec["device"], t, rec["screen"], rec["lock"], rec["net"], rec["charging"], float(level)
        )
    except ValueError as exc:
        raise MalformedEntry(line_no, str(exc)) from None


def parse_trace_file(path: str | Path, horizon: int = WEEK) -> list[StateTrace]:
    """Read a JSON-lines trace file into one trace per device.

    Entries are grouped by device and sorted by time.  The horizon is
    stretched to cover the last entry if needed.  Traces come back ordered by
    device id.
    """
    grouped: dict[str, list[StateEntry]] = defaultdict(list)
    seen_any = False
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            seen_any = True
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedEntry(line_no, f"invalid JSON: {exc.msg}") from None
            entry = _entry_from_record(rec, line_no)
            grouped[entry.device_id].append(entry)
    if not seen_any:
        raise EmptyFile(str(path))
    traces = []
    for device_id in sorted(grouped):
        entries = sorted(grouped[device_id], key=lambda e: e.timestamp)
        h = max(horizon, entries[-1].timestamp + 1)
        traces.append(StateTrace(device_id, tuple(entries), h))
    return traces


def write_trace_file(traces: Iterable[StateTrace], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for trace in traces:
            for e in trace.entries:
                fh.write(json.dumps(e.to_record(), separators=(",", ":")) + "\n")


# -- synthetic generation ----------------------------------------------------


@dataclass(frozen=True)
class TraceGenSpec:
    """Dwell-time parameters for the synthetic state processes.

    Each of the screen, network and charging processes alternates between two
    states with exponential dwell times.  ``diurnal`` scales the screen-off and
    charging dwell means by the hour of day at which the dwell starts.
    """

    screen_on_mean: float = 1200.0
    screen_off_mean: float = 4800.0
    wifi_mean: float = 6000.0
    cell_mean: float = 2400.0
    charging_mean: float = 7000.0
    not_charging_mean: float = 3000.0
    diurnal: tuple[float, ...] = field(default_factory=lambda: (1.0,) * 24)
    charge_rate: float = 0.01
    drain_rate: float = 0.002
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "diurnal", tuple(float(f) for f in self.diurnal))
        means = (
            self.screen_on_mean,
            self.screen_off_mean,
            self.wifi_mean,
            self.cell_mean,
            self.charging_mean,
            self.not_charging_mean,
        )
        if any(not m > 0 for m in means):
            raise InvalidSpec("dwell means must be positive")
        if len(self.diurnal) != 24 or any(not f > 0 for f in self.diurnal):
            raise InvalidSpec("diurnal needs 24 positive factors")
        if self.charge_rate < 0 or self.drain_rate < 0:
            raise InvalidSpec("battery rates must be non-negative")


class _TwoStateProcess:
    def __init__(self, rng: np.random.Generator, mean_a: float, mean_b: float, modulate_a: Sequence[float] | None):
        self.rng = rng
        self.means = (mean_a, mean_b)
        self.modulate_a = modulate_a
        self.in_a = bool(rng.random() < mean_a / (mean_a + mean_b))
        self.next_switch = self._dwell(0)

    def _dwell(self, t: int) -> int:
        mean = self.means[0] if self.in_a else self.means[1]
        if self.in_a and self.modulate_a is not None:
            mean *= self.modulate_a[(t // 3600) % 24]
        draw = self.rng.exponential(mean)
        return t + max(1, math.ceil(draw)) if math.isfinite(draw) else math.inf

    def switch(self, t: int) -> None:
        self.in_a = not self.in_a
        self.next_switch = self._dwell(t)


def _generate_one(spec: TraceGenSpec, device_id: str, rng: np.random.Generator, horizon: int) -> StateTrace:
    screen = _TwoStateProcess(rng, spec.screen_off_mean, spec.screen_on_mean, spec.diurnal)
    net = _TwoStateProcess(rng, spec.wifi_mean, spec.cell_mean, None)
    charge = _TwoStateProcess(rng, spec.charging_mean, spec.not_charging_mean, spec.diurnal)
    procs = (screen, net, charge)
    level = float(rng.uniform(20.0, 100.0))
    cell_kind = "4g" if rng.random() < 0.8 else "3g"

    def snapshot(t: int) -> StateEntry:
        off = screen.in_a
        return StateEntry(
            device_id,
            t,
            "off" if off else "on",
            "locked" if off else "unlocked",
            "wifi" if net.in_a else cell_kind,
            charge.in_a,
            round(level, 1),
        )

    entries = [snapshot(0)]
    t = 0
    while True:
        t_next = min(p.next_switch for p in procs)
        if t_next >= horizon:
            break
        rate = spec.charge_rate if charge.in_a else -spec.drain_rate
        level = min(100.0, max(0.0, level + rate * (t_next - t)))
        t = int(t_next)
        for p in procs:
            if p.next_switch == t:
                p.switch(t)
                if p is net and not net.in_a:
                    cell_kind = "4g" if rng.random() < 0.8 else "3g"
        entries.append(snapshot(t))
    return StateTrace(device_id, tuple(entries), horizon)


def generate_traces(spec: TraceGenSpec, n_devices: int, horizon: int = WEEK, prefix: str = "trace") -> list[StateTrace]:
    """Synthesize ``n_devices`` independent traces; reproducible per seed."""
    if n_devices < 1:
        raise InvalidSpec("n_devices must be at least 1")
    if horizon <= 0:
        raise InvalidSpec("horizon must be positive")
    width = len(str(n_devices - 1))
    out = []
    for i in range(n_devices):
        rng = np.random.default_rng([spec.seed, i])
        out.append(_generate_one(spec, f"{prefix}{i:0{width}d}", rng, horizon))
    return out
