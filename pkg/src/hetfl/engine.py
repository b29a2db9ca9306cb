"""Round-by-round executor of the Selection / Configuration / Reporting protocol.

Time is integer simulated seconds.  Traces are replayed cyclically: a device
at absolute time ``t`` is in the state its trace shows at ``t mod horizon``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import algorithms as alg
from .capacity import (
    DeviceProfile,
    ProfileTable,
    assign_profile,
    builtin_table,
    expected_transfer_duration,
    sample_bandwidth,
    training_duration,
    transfer_duration,
)
from .errors import ConfigError, InsufficientTraces, InvalidCall, NoDevicesAvailable
from .learning import (
    LearnerSpec,
    LocalDataset,
    ModelWeights,
    PartitionSpec,
    dataset_loss,
    evaluate,
    init_weights,
    local_train,
    partition,
)
from .trace import (
    WEEK,
    AvailabilityTimeline,
    StateCriteria,
    StateTrace,
    TraceGenSpec,
    availability,
    generate_traces,
    ideal_trace,
    interruption_cause,
)

log = logging.getLogger(__name__)

ARMS = ("aware", "unaware", "no_hardware", "no_state")
INTERRUPTION_SUBS = ("user_interaction", "battery_off", "network_change")
FAILURE_TAGS = ("network", "interruption", "training")

# rng stream labels under the engine seed
_SELECT, _DEVICE, _TRACE_PICK, _PROFILE_PICK, _INIT = range(5)


@dataclass(frozen=True)
class Seeds:
    partition: int = 0
    traces: int = 1
    engine: int = 2


@dataclass(frozen=True)
class SimConfig:
    """Everything one simulation needs.

    ``partition.n_devices``/``partition.seed`` and ``trace_gen.seed`` are
    overridden by ``n_devices`` and ``seeds`` when data are generated.
    """

    n_devices: int = 100
    devices_per_round: int = 100
    checkin_window: int = 30
    reporting_deadline: int = 300
    local_epochs: int = 1
    num_rounds: int = 50
    target_accuracy: float | None = None
    sustain_rounds: int = 1
    max_rounds: int = 10_000
    heterogeneity: str = "aware"
    aggregator: alg.AggregatorSpec = field(default_factory=alg.AggregatorSpec)
    compressor: alg.CompressorSpec = field(default_factory=alg.CompressorSpec)
    learner: LearnerSpec = field(default_factory=LearnerSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    trace_gen: TraceGenSpec = field(default_factory=TraceGenSpec)
    criteria: StateCriteria = field(default_factory=StateCriteria)
    trace_horizon: int = WEEK
    n_traces: int | None = None
    device_models: tuple[str, ...] = ()
    network_failure_factor: float = 3.0
    seeds: Seeds = field(default_factory=Seeds)

    def validate(self) -> None:
        def bad(key, reason):
            raise ConfigError(key, reason)

        if self.n_devices < 1:
            bad("n_devices", "must be at least 1")
        if not 1 <= self.devices_per_round <= self.n_devices:
            bad("devices_per_round", "must lie in [1, n_devices]")
        if self.checkin_window <= 0:
            bad("checkin_window", "must be positive")
        if self.reporting_deadline <= self.checkin_window:
            bad("reporting_deadline", "must exceed checkin_window")
        if self.local_epochs < 1:
            bad("local_epochs", "must be at least 1")
        if self.heterogeneity not in ARMS:
            bad("heterogeneity", f"must be one of {ARMS}")
        if self.target_accuracy is not None and not 0 < self.target_accuracy <= 1:
            bad("target_accuracy", "must lie in (0, 1]")
        if self.num_rounds < 0 and self.target_accuracy is None:
            bad("num_rounds", "unlimited rounds need a target_accuracy")
        if self.sustain_rounds < 1:
            bad("sustain_rounds", "must be at least 1")
        if self.max_rounds < 1:
            bad("max_rounds", "must be at least 1")
        if self.trace_horizon <= 0:
            bad("trace_horizon", "must be positive")
        if self.n_traces is not None and self.n_traces < 1:
            bad("n_traces", "must be at least 1")
        if self.network_failure_factor <= 0:
            bad("network_failure_factor", "must be positive")

    @property
    def unlimited(self) -> bool:
        return self.num_rounds < 0


@dataclass(frozen=True)
class FailureCause:
    tag: str
    interruption_sub: str | None = None

    def __post_init__(self):
        if self.tag not in FAILURE_TAGS:
            raise ValueError(f"unknown failure tag {self.tag!r}")
        if (self.tag == "interruption") != (self.interruption_sub is not None):
            raise ValueError("interruption_sub is required exactly for interruptions")
        if self.interruption_sub is not None and self.interruption_sub not in INTERRUPTION_SUBS:
            raise ValueError(f"unknown interruption sub-cause {self.interruption_sub!r}")

    def to_dict(self) -> dict:
        return {"tag": self.tag, "interruption_sub": self.interruption_sub}


@dataclass(frozen=True)
class Violation:
    at: int  # seconds after the device started
    sub_cause: str


@dataclass(frozen=True)
class Timings:
    download: int
    train: int
    upload: int

    @property
    def comm(self) -> int:
        return self.download + self.upload

    @property
    def total(self) -> int:
        return self.download + self.train + self.upload


@dataclass
class DeviceRuntime:
    device_id: str
    trace: StateTrace
    timeline: AvailabilityTimeline
    profile: DeviceProfile
    dataset: LocalDataset
    rng: np.random.Generator
    criteria: StateCriteria
    cumulative_epoch_equivalents: float = 0.0
    successful_epoch_equivalents: float = 0.0
    rounds_succeeded: int = 0
    rounds_failed: int = 0
    residual: np.ndarray | None = None

    @property
    def always_available(self) -> bool:
        return self.timeline.intervals == ((0, self.timeline.horizon),)

    def available_until(self, t: int) -> float:
        """End of the availability stretch containing ``t`` (``t`` if unavailable)."""
        if self.always_available:
            return math.inf
        horizon = self.timeline.horizon
        base = (t // horizon) * horizon
        iv = self.timeline.interval_at(t - base)
        if iv is None:
            return t
        end = iv[1]
        if end == horizon:
            first = self.timeline.intervals[0]
            if first[0] != 0:
                return base + horizon
            return base + horizon + first[1]
        return base + end

    def violation_cause(self, t: int) -> str:
        return interruption_cause(self.trace, self.criteria, t % self.trace.horizon)


@dataclass
class DeviceResult:
    device_id: str
    outcome: alg.ModelUpdate | FailureCause
    elapsed: int
    timings: Timings
    epochs_done: float

    @property
    def succeeded(self) -> bool:
        return isinstance(self.outcome, alg.ModelUpdate)


@dataclass
class RoundReport:
    round_index: int
    wall_clock_start: int
    wall_clock_end: int
    checked_in: list[str]
    selected: list[str]
    succeeded: list[str]
    failed: list[tuple[str, FailureCause]]
    global_accuracy: float
    global_loss: float
    bytes_uploaded: int
    bytes_downloaded: int
    elapsed: dict[str, int] = field(default_factory=dict)
    comm_time: dict[str, int] = field(default_factory=dict)
    epoch_equivalents: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["failed"] = [[dev, cause.to_dict()] for dev, cause in self.failed]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RoundReport:
        d = dict(d)
        d["failed"] = [(dev, FailureCause(**cause)) for dev, cause in d["failed"]]
        return cls(**d)


# -- device set ----------------------------------------------------------------


def build_device_set(
    config: SimConfig,
    traces: Sequence[StateTrace],
    table: ProfileTable,
    datasets: Sequence[LocalDataset],
) -> list[DeviceRuntime]:
    """Pair each dataset with a trace and a hardware profile per the arm.

    Trace and profile picks come from their own rng streams, so every arm
    sees the same picks for the same seeds.
    """
    n = config.n_devices
    if len(datasets) < n:
        raise ValueError(f"need {n} datasets, got {len(datasets)}")
    real_state = config.heterogeneity in ("aware", "no_hardware")
    real_hw = config.heterogeneity in ("aware", "no_state")
    if real_state and len(traces) < n:
        raise InsufficientTraces(f"need {n} traces, got {len(traces)}")
    seed = config.seeds.engine
    pick = np.random.default_rng([seed, _TRACE_PICK]).permutation(max(len(traces), n))
    prof_rng = np.random.default_rng([seed, _PROFILE_PICK])
    devices = []
    for i, ds in enumerate(datasets[:n]):
        model = config.device_models[i] if i < len(config.device_models) else f"unlisted-{i}"
        profile = assign_profile(table, model, prof_rng)
        if real_state:
            src = traces[int(pick[i])]
            trace = StateTrace(ds.device_id, tuple(dataclasses.replace(e, device_id=ds.device_id) for e in src.entries), src.horizon)
        else:
            trace = ideal_trace(ds.device_id, config.trace_horizon)
        devices.append(
            DeviceRuntime(
                device_id=ds.device_id,
                trace=trace,
                timeline=availability(trace, config.criteria),
                profile=profile if real_hw else table.baseline,
                dataset=ds,
                rng=np.random.default_rng([seed, _DEVICE, i]),
                criteria=config.criteria,
            )
        )
    return devices


# -- protocol steps --------------------------------------------------------------


def run_selection(
    devices: Sequence[DeviceRuntime], t_now: int, config: SimConfig, rng: np.random.Generator
) -> tuple[list[DeviceRuntime], list[DeviceRuntime]]:
    """Check-in over ``[t_now, t_now + window]`` then uniform sampling."""
    t_start = t_now + config.checkin_window
    checked_in = [d for d in devices if d.available_until(t_now) > t_start]
    if not checked_in:
        raise NoDevicesAvailable(f"no device available at t={t_now}")
    k = min(config.devices_per_round, len(checked_in))
    idx = np.sort(rng.choice(len(checked_in), size=k, replace=False))
    return checked_in, [checked_in[i] for i in idx]


def classify_failure(
    timings: Timings,
    deadline: int,
    fleet_avg_comm: float,
    violation: Violation | None = None,
    network_factor: float = 3.0,
) -> FailureCause:
    """Interruption beats network beats training."""
    if not fleet_avg_comm > 0:
        raise ValueError("fleet_avg_comm must be positive")
    if violation is not None and violation.at < min(timings.total, deadline):
        return FailureCause("interruption", violation.sub_cause)
    if timings.total <= deadline:
        raise InvalidCall("device neither missed the deadline nor was interrupted")
    if timings.comm > network_factor * fleet_avg_comm:
        return FailureCause("network")
    return FailureCause("training")


def _planned_epochs(profile, n_train, epochs, t_down, t_up_est, deadline) -> int:
    for e in range(epochs, 0, -1):
        if t_down + training_duration(profile, n_train, e) + t_up_est <= deadline:
            return e
    return 1


def run_device_round(
    runtime: DeviceRuntime,
    global_weights: ModelWeights,
    config: SimConfig,
    t_start: int,
    fleet_avg_comm: float,
) -> DeviceResult:
    """Download, train, upload, then check the reporting qualification."""
    rng = runtime.rng
    profile, ds = runtime.profile, runtime.dataset
    deadline = config.reporting_deadline
    bw_down = sample_bandwidth(profile, "down", rng)
    bw_up = sample_bandwidth(profile, "up", rng)
    t_down = transfer_duration(global_weights.byte_size, bw_down)

    agg = config.aggregator
    epochs = config.local_epochs
    if agg.kind == "fedprox":
        if agg.fedprox_partial:
            t_up_est = transfer_duration(global_weights.byte_size, bw_up)
            epochs = _planned_epochs(profile, ds.n_train, epochs, t_down, t_up_est, deadline)
        upd = alg.fedprox_local_train(global_weights, ds, config.learner, agg.mu, config.local_epochs, epochs, rng)
        delta, loss = upd.delta(), upd.train_loss
    else:
        local, loss = local_train(global_weights, ds, config.learner, epochs, rng)
        delta = local.vector - global_weights.vector
    if agg.kind == "qfedavg":
        loss = dataset_loss(global_weights, ds.x_train, ds.y_train, config.learner)

    comp = config.compressor
    carry = comp.kind == "gdrop" and comp.residual
    if carry and runtime.residual is not None:
        delta = delta + runtime.residual
    payload = alg.compress(delta, global_weights.shapes, comp)

    timings = Timings(t_down, training_duration(profile, ds.n_train, epochs), transfer_duration(payload.byte_size, bw_up))
    until = runtime.available_until(t_start)
    violation = None
    if until < t_start + min(timings.total, deadline):
        at = int(until) - t_start
        violation = Violation(at, runtime.violation_cause(int(until)))

    if violation is None and timings.total <= deadline:
        if carry:
            runtime.residual = delta - payload.to_dense()
        update = alg.ModelUpdate(runtime.device_id, payload, ds.n_train, loss)
        return DeviceResult(runtime.device_id, update, timings.total, timings, float(epochs))

    cause = classify_failure(timings, deadline, fleet_avg_comm, violation, config.network_failure_factor)
    stop = violation.at if cause.tag == "interruption" else deadline
    frac = min(1.0, max(0.0, (stop - t_down) / timings.train)) if timings.train else 0.0
    return DeviceResult(runtime.device_id, cause, deadline, timings, frac * epochs)


# -- simulation ----------------------------------------------------------------------


class Simulation:
    """Single-owner simulation state advanced one round at a time."""

    def __init__(
        self,
        config: SimConfig,
        traces: Sequence[StateTrace] | None = None,
        table: ProfileTable | None = None,
        datasets: Sequence[LocalDataset] | None = None,
    ):
        config.validate()
        self.config = config
        self.table = table or builtin_table()
        if datasets is None:
            pspec = dataclasses.replace(config.partition, n_devices=config.n_devices, seed=config.seeds.partition)
            datasets = partition(pspec)
            n_classes = pspec.n_classes
        else:
            n_classes = 1 + max(int(max(d.y_train.max(initial=0), d.y_test.max(initial=0))) for d in datasets)
        if traces is None and config.heterogeneity in ("aware", "no_hardware"):
            gspec = dataclasses.replace(config.trace_gen, seed=config.seeds.traces)
            traces = generate_traces(gspec, config.n_traces or config.n_devices, config.trace_horizon)
        self.devices = build_device_set(config, traces or (), self.table, datasets)
        self.datasets = [d.dataset for d in self.devices]
        feature_dim = self.datasets[0].x_train.shape[1]
        seed = config.seeds.engine
        self.weights = init_weights(config.learner, feature_dim, n_classes, np.random.default_rng([seed, _INIT]))
        self.select_rng = np.random.default_rng([seed, _SELECT])
        self.clock = 0
        self.reports: list[RoundReport] = []
        baseline = self.table.baseline
        dense = self.weights.byte_size
        seed_comm = expected_transfer_duration(baseline, dense, "down") + expected_transfer_duration(baseline, dense, "up")
        self._comm_sum = float(max(seed_comm, 1))
        self._comm_count = 1
        self._hits = 0
        self._last_accuracy, self._last_loss = self._evaluate()

    @property
    def fleet_avg_comm(self) -> float:
        return self._comm_sum / self._comm_count

    def _evaluate(self) -> tuple[float, float]:
        _, acc = evaluate(self.weights, self.datasets, self.config.learner)
        x = np.concatenate([d.x_test for d in self.datasets])
        y = np.concatenate([d.y_test for d in self.datasets])
        return acc, dataset_loss(self.weights, x, y, self.config.learner)

    def per_device_accuracy(self) -> list[float]:
        return evaluate(self.weights, self.datasets, self.config.learner)[0]

    def run_round(self) -> RoundReport:
        cfg = self.config
        t0 = self.clock
        index = len(self.reports)
        try:
            checked_in, selected = run_selection(self.devices, t0, cfg, self.select_rng)
        except NoDevicesAvailable:
            self.clock = t0 + cfg.checkin_window
            report = RoundReport(index, t0, self.clock, [], [], [], [], self._last_accuracy, self._last_loss, 0, 0)
            self.reports.append(report)
            return report

        t_start = t0 + cfg.checkin_window
        results = [run_device_round(d, self.weights, cfg, t_start, self.fleet_avg_comm) for d in selected]
        results.sort(key=lambda r: r.device_id)
        by_id = {d.device_id: d for d in selected}
        updates = []
        for r in results:
            rt = by_id[r.device_id]
            rt.cumulative_epoch_equivalents += r.epochs_done
            if r.succeeded:
                rt.rounds_succeeded += 1
                rt.successful_epoch_equivalents += r.epochs_done
                updates.append(r.outcome)
            else:
                rt.rounds_failed += 1
            self._comm_sum += r.timings.comm
            self._comm_count += 1

        if updates:
            self.weights = alg.aggregate(self.weights, updates, cfg.aggregator)
            self._last_accuracy, self._last_loss = self._evaluate()

        self.clock = t_start + min(cfg.reporting_deadline, max(r.elapsed for r in results))
        report = RoundReport(
            round_index=index,
            wall_clock_start=t0,
            wall_clock_end=self.clock,
            checked_in=sorted(d.device_id for d in checked_in),
            selected=[r.device_id for r in results],
            succeeded=[r.device_id for r in results if r.succeeded],
            failed=[(r.device_id, r.outcome) for r in results if not r.succeeded],
            global_accuracy=self._last_accuracy,
            global_loss=self._last_loss,
            bytes_uploaded=sum(r.outcome.byte_size for r in results if r.succeeded),
            bytes_downloaded=self.weights.byte_size * len(results),
            elapsed={r.device_id: r.elapsed for r in results},
            comm_time={r.device_id: r.timings.comm for r in results},
            epoch_equivalents={r.device_id: r.epochs_done for r in results},
        )
        self.reports.append(report)
        return report

    def converged(self) -> bool:
        target = self.config.target_accuracy
        if target is None or not self.reports:
            return False
        return self._hits >= self.config.sustain_rounds

    def run(self) -> list[RoundReport]:
        cfg = self.config
        limit = cfg.max_rounds if cfg.unlimited else cfg.num_rounds
        while len(self.reports) < limit:
            report = self.run_round()
            if cfg.target_accuracy is not None:
                self._hits = self._hits + 1 if report.global_accuracy >= cfg.target_accuracy else 0
                if self.converged():
                    break
        if cfg.unlimited and not self.converged():
            log.warning("target accuracy not reached within max_rounds=%d", cfg.max_rounds)
        return self.reports


def run_simulation(
    config: SimConfig,
    traces: Sequence[StateTrace] | None = None,
    table: ProfileTable | None = None,
    datasets: Sequence[LocalDataset] | None = None,
) -> list[RoundReport]:
    return Simulation(config, traces, table, datasets).run()
