"""Exception types shared across the simulator."""

from __future__ import annotations


class HetFLError(Exception):
    """Base class for all simulator errors."""


class MalformedEntry(HetFLError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class UnsortedTimestamps(HetFLError):
    def __init__(self, device_id: str):
        super().__init__(f"device {device_id!r}: timestamps are not strictly increasing")
        self.device_id = device_id


class EmptyFile(HetFLError):
    pass


class InvalidSpec(HetFLError):
    pass


class EmptyTrainSet(HetFLError):
    pass


class EmptyTestSet(HetFLError):
    pass


class EmptyInput(HetFLError):
    pass


class EmptyRound(HetFLError):
    """No qualified updates were available for aggregation."""


class NonpositiveLoss(HetFLError):
    pass


class InsufficientTraces(HetFLError):
    pass


class NoDevicesAvailable(HetFLError):
    pass


class InvalidCall(HetFLError):
    pass


class ConfigError(HetFLError):
    def __init__(self, key: str, reason: str):
        super().__init__(f"{key}: {reason}")
        self.key = key
        self.reason = reason
