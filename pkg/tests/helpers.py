"""Shared builders for the test suite."""

import numpy as np

from hetfl.capacity import DeviceProfile, ProfileTable
from hetfl.trace import NETWORK_STATES, StateEntry, StateTrace


def speed_table() -> ProfileTable:
    """Three profiles with 1:2:5 training speed and the builtin bandwidths."""
    return ProfileTable(
        (
            DeviceProfile("high", 0.1, 30, 8, 15, 4),
            DeviceProfile("mid", 0.2, 20, 6, 10, 3),
            DeviceProfile("low", 0.5, 10, 4, 5, 2),
        ),
        {},
        "mid",
    )


def random_trace(rng: np.random.Generator, n_entries: int, horizon: int, device_id: str = "d") -> StateTrace:
    times = np.sort(rng.choice(horizon, size=n_entries, replace=False))
    entries = []
    for t in times:
        entries.append(
            StateEntry(
                device_id,
                int(t),
                str(rng.choice(["on", "off"], p=[0.3, 0.7])),
                str(rng.choice(["locked", "unlocked"])),
                str(rng.choice(NETWORK_STATES, p=[0.5, 0.05, 0.1, 0.2, 0.05, 0.1])),
                bool(rng.random() < 0.7),
                float(rng.integers(0, 101)),
            )
        )
    return StateTrace(device_id, tuple(entries), horizon)


def scan_mask(trace: StateTrace, criteria) -> np.ndarray:
    """Per-second availability from the state in force, no interval logic."""
    ts = np.array(trace.timestamps)
    idx = np.searchsorted(ts, np.arange(trace.horizon), side="right") - 1
    ok = np.array([criteria.satisfied(e) for e in trace.entries] + [False])
    return ok[idx]  # idx == -1 picks the trailing False: before the first entry


def timeline_mask(timeline) -> np.ndarray:
    mask = np.zeros(timeline.horizon, dtype=bool)
    for a, b in timeline.intervals:
        mask[a:b] = True
    return mask
