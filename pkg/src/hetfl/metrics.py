"""Analysis quantities computed from round logs."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .engine import INTERRUPTION_SUBS, DeviceRuntime, RoundReport
from .errors import EmptyInput


def nearest_rank(sorted_values: Sequence[float], p: float) -> float:
    """Order statistic at 0-based index ``floor(p * n)``, clipped to the last.

    No interpolation: for 100 values 0.00..0.99 the 10% and 90% points are
    0.10 and 0.90.
    """
    n = len(sorted_values)
    return sorted_values[min(n - 1, math.floor(p * n + 1e-9))]


@dataclass(frozen=True)
class FairnessReport:
    mean_accuracy: float
    worst_decile_accuracy: float
    best_decile_accuracy: float
    std_of_accuracy: float
    variance_of_accuracy: float


def fairness(per_device_accuracy: Iterable[float]) -> FairnessReport:
    values = sorted(float(a) for a in per_device_accuracy)
    if not values:
        raise EmptyInput("no accuracies given")
    arr = np.array(values)
    mean = float(arr.mean())
    var = float(((arr - mean) ** 2).mean())
    return FairnessReport(
        mean_accuracy=mean,
        worst_decile_accuracy=nearest_rank(values, 0.1),
        best_decile_accuracy=nearest_rank(values, 0.9),
        std_of_accuracy=math.sqrt(var),
        variance_of_accuracy=var,
    )


@dataclass(frozen=True)
class FailureBreakdown:
    attempts: int
    failures: int
    overall: float
    network_share: float
    interruption_share: float
    training_share: float
    interruption_sub_shares: dict[str, float] = field(default_factory=dict)

    def row(self) -> dict:
        d = asdict(self)
        subs = d.pop("interruption_sub_shares")
        d.update({f"interruption_{k}_share": v for k, v in subs.items()})
        return d


def failure_breakdown(reports: Sequence[RoundReport]) -> FailureBreakdown:
    """Failure proportion over all device-round attempts, split by cause.

    Cause shares are fractions of the failures; sub-cause shares are
    fractions of the interruptions.  Empty levels report zeros.
    """
    attempts = sum(len(r.selected) for r in reports)
    tags: Counter[str] = Counter()
    subs: Counter[str] = Counter()
    for r in reports:
        for _, cause in r.failed:
            tags[cause.tag] += 1
            if cause.interruption_sub:
                subs[cause.interruption_sub] += 1
    failures = sum(tags.values())
    n_int = tags["interruption"]

    def share(k, tot):
        return k / tot if tot else 0.0

    return FailureBreakdown(
        attempts=attempts,
        failures=failures,
        overall=share(failures, attempts),
        network_share=share(tags["network"], failures),
        interruption_share=share(n_int, failures),
        training_share=share(tags["training"], failures),
        interruption_sub_shares={s: share(subs[s], n_int) for s in INTERRUPTION_SUBS},
    )


@dataclass(frozen=True)
class BiasReport:
    loads: dict[str, float]
    successful_loads: dict[str, float]
    load_variance: float
    top30_share: float
    never_participated: float
    participation_curve: list[float]


def top_share(loads: Sequence[float], fraction: float = 0.3) -> float:
    """Share of the total held by the largest ``ceil(fraction * n)`` loads."""
    total = float(sum(loads))
    if total == 0:
        return 0.0
    k = math.ceil(fraction * len(loads) - 1e-9)
    return float(sum(sorted(loads, reverse=True)[:k])) / total


def bias_report(devices: Sequence[DeviceRuntime], reports: Sequence[RoundReport]) -> BiasReport:
    """Computation loads in epoch equivalents; failed attempts count as load."""
    ids = [d.device_id for d in devices]
    loads = {d.device_id: d.cumulative_epoch_equivalents for d in devices}
    ok_loads = {d.device_id: d.successful_epoch_equivalents for d in devices}
    never = sum(1 for d in devices if d.rounds_succeeded == 0 and d.rounds_failed == 0)
    seen: set[str] = set()
    curve = []
    for r in reports:
        seen.update(r.succeeded)
        curve.append(len(seen & set(ids)) / len(ids))
    vals = np.array([loads[i] for i in ids])
    return BiasReport(
        loads=loads,
        successful_loads=ok_loads,
        load_variance=float(vals.var()),
        top30_share=top_share(list(vals)),
        never_participated=never / len(ids),
        participation_curve=curve,
    )


# -- CSV output ----------------------------------------------------------------


def _write_rows(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_fairness_csv(path, report: FairnessReport, per_device: dict[str, float]) -> None:
    rows = [{"device_id": "ALL", "accuracy": report.mean_accuracy, **asdict(report)}]
    rows += [
        {"device_id": k, "accuracy": v, **{f: "" for f in asdict(report)}} for k, v in sorted(per_device.items())
    ]
    _write_rows(path, rows)


def write_failure_csv(path, breakdowns: dict[object, FailureBreakdown], key: str = "deadline") -> None:
    _write_rows(path, [{key: k, **b.row()} for k, b in breakdowns.items()])


def write_bias_csv(path, report: BiasReport) -> None:
    rows = [
        {"device_id": k, "computation_load": report.loads[k], "successful_load": report.successful_loads[k]}
        for k in sorted(report.loads)
    ]
    _write_rows(path, rows)


def write_participation_csv(path, report: BiasReport) -> None:
    _write_rows(path, [{"round": i, "participated_fraction": v} for i, v in enumerate(report.participation_curve)])
