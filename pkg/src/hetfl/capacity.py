"""Hardware heterogeneity: training speed and link bandwidth per device."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr, ndtri

BANDWIDTH_FLOOR_MBPS = 0.1


def ceil_seconds(x: float) -> int:
    # Forgive float noise (0.02 * 100 * 5 == 10.000000000000002) before ceil,
    # without letting tiny positive durations collapse to zero.
    return math.ceil(x - 1e-9 * max(1.0, abs(x)))


@dataclass(frozen=True)
class DeviceProfile:
    profile_id: str
    sec_per_sample_epoch: float
    down_mbps_mean: float
    down_mbps_std: float
    up_mbps_mean: float
    up_mbps_std: float

    def __post_init__(self):
        if not self.sec_per_sample_epoch > 0:
            raise ValueError("sec_per_sample_epoch must be positive")
        if not (self.down_mbps_mean > 0 and self.up_mbps_mean > 0):
            raise ValueError("bandwidth means must be positive")
        if self.down_mbps_std < 0 or self.up_mbps_std < 0:
            raise ValueError("bandwidth stds must be non-negative")

    def bandwidth_params(self, direction: str) -> tuple[float, float]:
        if direction == "down":
            return self.down_mbps_mean, self.down_mbps_std
        if direction == "up":
            return self.up_mbps_mean, self.up_mbps_std
        raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")


@dataclass(frozen=True)
class ProfileTable:
    profiles: tuple[DeviceProfile, ...]
    model_map: dict[str, str]
    baseline_id: str = "mid"

    def __post_init__(self):
        object.__setattr__(self, "profiles", tuple(self.profiles))
        if not self.profiles:
            raise ValueError("profile table is empty")
        ids = [p.profile_id for p in self.profiles]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate profile ids")
        for model, pid in self.model_map.items():
            if pid not in ids:
                raise ValueError(f"model {model!r} maps to unknown profile {pid!r}")
        if self.baseline_id not in ids:
            raise ValueError(f"baseline profile {self.baseline_id!r} not in table")

    def get(self, profile_id: str) -> DeviceProfile:
        for p in self.profiles:
            if p.profile_id == profile_id:
                return p
        raise KeyError(profile_id)

    @property
    def baseline(self) -> DeviceProfile:
        return self.get(self.baseline_id)

    def to_dict(self) -> dict:
        return {
            "profiles": [asdict(p) for p in self.profiles],
            "model_map": dict(self.model_map),
            "baseline": self.baseline_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ProfileTable:
        return cls(
            tuple(DeviceProfile(**p) for p in d["profiles"]),
            dict(d["model_map"]),
            d.get("baseline", "mid"),
        )


def builtin_table() -> ProfileTable:
    """High/mid/low tiers with 1:2:5 training cost; "mid" is the baseline."""
    profiles = (
        DeviceProfile("high", 0.01, 30.0, 8.0, 15.0, 4.0),
        DeviceProfile("mid", 0.02, 20.0, 6.0, 10.0, 3.0),
        DeviceProfile("low", 0.05, 10.0, 4.0, 5.0, 2.0),
    )
    model_map = {"samsung_note_10": "high", "redmi_note_8": "mid", "nexus_6": "low"}
    return ProfileTable(profiles, model_map, "mid")


def load_profile_table(path: str | Path) -> ProfileTable:
    with open(path, encoding="utf-8") as fh:
        return ProfileTable.from_dict(json.load(fh))


def assign_profile(table: ProfileTable, device_model: str, rng: np.random.Generator) -> DeviceProfile:
    """Exact lookup, falling back to a uniformly random profile for unknown models."""
    pid = table.model_map.get(device_model)
    if pid is not None:
        return table.get(pid)
    return table.profiles[int(rng.integers(len(table.profiles)))]


def training_duration(profile: DeviceProfile, n_samples: int, epochs: int) -> int:
    if n_samples < 1 or epochs < 1:
        raise ValueError("n_samples and epochs must be at least 1")
    return ceil_seconds(profile.sec_per_sample_epoch * n_samples * epochs)


def sample_bandwidth(profile: DeviceProfile, direction: str, rng: np.random.Generator) -> float:
    """Draw Mbps from the profile's normal, truncated below at the floor.

    Uses one uniform draw and the inverse survival function of the truncated
    normal, which stays accurate when the floor sits far in either tail.
    """
    mean, std = profile.bandwidth_params(direction)
    u = rng.random()
    if std == 0:
        return max(mean, BANDWIDTH_FLOOR_MBPS)
    a = (BANDWIDTH_FLOOR_MBPS - mean) / std
    z = -ndtri((1.0 - u) * ndtr(-a))
    return max(BANDWIDTH_FLOOR_MBPS, float(mean + std * z))


def transfer_duration(payload_bytes: int, mbps: float) -> int:
    if payload_bytes < 0:
        raise ValueError("payload_bytes must be non-negative")
    if payload_bytes == 0:
        return 0
    return ceil_seconds(payload_bytes * 8 / (mbps * 1e6))


def sample_transfer_duration(
    profile: DeviceProfile, payload_bytes: int, direction: str, rng: np.random.Generator
) -> int:
    return transfer_duration(payload_bytes, sample_bandwidth(profile, direction, rng))


def expected_transfer_duration(profile: DeviceProfile, payload_bytes: int, direction: str) -> int:
    """Transfer time at the mean bandwidth; seeds the fleet communication average."""
    mean, _ = profile.bandwidth_params(direction)
    return transfer_duration(payload_bytes, mean)
