"""Experiment configuration, sweep orchestration and output files.

Usage::

    hetfl run experiment.json [--parallel 4] [--output runs/]
    hetfl validate experiment.json
    hetfl dump-profiles [--output table.json]
    hetfl gen-traces trace_spec.json traces.jsonl

The output root defaults to ``$HETFL_OUTPUT_ROOT`` or ``./runs``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .algorithms import AggregatorSpec, CompressorSpec
from .capacity import builtin_table, load_profile_table
from .engine import SimConfig, Seeds, Simulation
from .errors import ConfigError, HetFLError
from .learning import LearnerSpec, PartitionSpec, load_csv_datasets
from .metrics import (
    bias_report,
    failure_breakdown,
    fairness,
    write_bias_csv,
    write_failure_csv,
    write_fairness_csv,
    write_participation_csv,
)
from .trace import StateCriteria, TraceGenSpec, generate_traces, parse_trace_file, write_trace_file

log = logging.getLogger("hetfl")

OUTPUT_ENV = "HETFL_OUTPUT_ROOT"
_SAFE_NAME = re.compile(r"^[A-Za-z0-9._-]+$")

_NESTED = {
    "aggregator": AggregatorSpec,
    "compressor": CompressorSpec,
    "learner": LearnerSpec,
    "partition": PartitionSpec,
    "trace_gen": TraceGenSpec,
    "criteria": StateCriteria,
    "seeds": Seeds,
}
_TUPLE_FIELDS = {"diurnal", "device_models"}
_TOP_LEVEL = ("config_name", "dataset", "model", "num_rounds", "trace_file", "profile_table", "sweep")


@dataclass(frozen=True)
class ExperimentConfig:
    config_name: str
    dataset: str = "synthetic"
    model: str = "logreg"
    sim: SimConfig = field(default_factory=SimConfig)
    trace_file: str | None = None
    profile_table: str | None = None
    sweep: tuple[tuple[str, tuple], ...] = ()

    @property
    def num_rounds(self) -> int:
        return self.sim.num_rounds

    @property
    def unlimited(self) -> bool:
        return self.sim.unlimited


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(prefix + key, "unknown key")
        if cls is SimConfig and key in _NESTED:
            value = _build(_NESTED[key], value, f"{prefix}{key}.")
        elif key in _TUPLE_FIELDS:
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (HetFLError, ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(prefix.rstrip(".") or cls.__name__, str(exc)) from None


def _unbuild(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            value = _unbuild(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def _sweep_paths() -> set[str]:
    paths = {f.name for f in dataclasses.fields(SimConfig)}
    for name, cls in _NESTED.items():
        paths |= {f"{name}.{f.name}" for f in dataclasses.fields(cls)}
    return paths


def config_from_dict(data: dict) -> ExperimentConfig:
    """Parse, default and validate an experiment document."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a JSON object")
    for key in ("config_name", "dataset", "model", "num_rounds"):
        if key not in data:
            raise ConfigError(key, "required key missing")
    name = data["config_name"]
    if not isinstance(name, str) or not _SAFE_NAME.match(name):
        raise ConfigError("config_name", "must be a non-empty filesystem-safe name")
    model = data["model"]
    if model not in ("logreg", "mlp1"):
        raise ConfigError("model", "must be 'logreg' or 'mlp1'")
    if not isinstance(data["num_rounds"], int) or isinstance(data["num_rounds"], bool):
        raise ConfigError("num_rounds", "must be an integer")

    sim_part = {k: v for k, v in data.items() if k not in _TOP_LEVEL}
    sim_part["num_rounds"] = data["num_rounds"]
    learner = dict(sim_part.get("learner", {}))
    if learner.get("family", model) != model:
        raise ConfigError("learner.family", "conflicts with model")
    learner["family"] = model
    sim_part["learner"] = learner
    sim = _build(SimConfig, sim_part)
    sim.validate()

    sweep = []
    paths = _sweep_paths()
    for i, cell in enumerate(data.get("sweep") or []):
        if not isinstance(cell, dict) or set(cell) != {"field", "values"}:
            raise ConfigError(f"sweep[{i}]", "needs exactly 'field' and 'values'")
        if cell["field"] not in paths:
            raise ConfigError(f"sweep[{i}].field", f"unknown field {cell['field']!r}")
        if not cell["values"]:
            raise ConfigError(f"sweep[{i}].values", "must be non-empty")
        sweep.append((cell["field"], tuple(cell["values"])))

    cfg = ExperimentConfig(
        config_name=name,
        dataset=data["dataset"],
        model=model,
        sim=sim,
        trace_file=data.get("trace_file"),
        profile_table=data.get("profile_table"),
        sweep=tuple(sweep),
    )
    for _, sim_cell in expand_sweep(cfg):
        sim_cell.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    sim = _unbuild(cfg.sim)
    sim["learner"].pop("family")
    out = {"config_name": cfg.config_name, "dataset": cfg.dataset, "model": cfg.model}
    out.update(sim)
    if cfg.trace_file is not None:
        out["trace_file"] = cfg.trace_file
    if cfg.profile_table is not None:
        out["profile_table"] = cfg.profile_table
    if cfg.sweep:
        out["sweep"] = [{"field": f, "values": list(v)} for f, v in cfg.sweep]
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc.msg}") from None
    return config_from_dict(data)


def _set_path(sim: SimConfig, path: str, value) -> SimConfig:
    head, _, rest = path.partition(".")
    if rest:
        inner = dataclasses.replace(getattr(sim, head), **{rest: value})
        return dataclasses.replace(sim, **{head: inner})
    return dataclasses.replace(sim, **{head: value})


def _cell_name(assignment: tuple[tuple[str, object], ...]) -> str:
    if not assignment:
        return "base"
    name = "__".join(f"{f}={v}" for f, v in assignment)
    return re.sub(r"[^A-Za-z0-9._=-]", "_", name)


def expand_sweep(cfg: ExperimentConfig) -> list[tuple[str, SimConfig]]:
    """Cartesian product of the sweep axes as (cell name, config) pairs."""
    fields_ = [f for f, _ in cfg.sweep]
    cells = []
    for combo in itertools.product(*(v for _, v in cfg.sweep)):
        sim = cfg.sim
        for f, v in zip(fields_, combo):
            try:
                sim = _set_path(sim, f, v)
            except (HetFLError, ValueError, TypeError) as exc:
                raise ConfigError(f, str(exc)) from None
        cells.append((_cell_name(tuple(zip(fields_, combo))), sim))
    return cells


# -- running ---------------------------------------------------------------------


def summary_row(config_name: str, cell: str, sim: Simulation) -> dict:
    reports = sim.reports
    fb = failure_breakdown(reports)
    attempts = fb.attempts or 1
    tags = {"network": 0, "interruption": 0, "training": 0}
    for r in reports:
        for _, cause in r.failed:
            tags[cause.tag] += 1
    return {
        "config_name": config_name,
        "cell": cell,
        "final_accuracy": reports[-1].global_accuracy if reports else sim._last_accuracy,
        "rounds": len(reports),
        "simulated_hours": sim.clock / 3600.0,
        "failure_rate": fb.overall,
        "network_failure_rate": tags["network"] / attempts,
        "interruption_failure_rate": tags["interruption"] / attempts,
        "training_failure_rate": tags["training"] / attempts,
        "bytes_uploaded": sum(r.bytes_uploaded for r in reports),
        "bytes_downloaded": sum(r.bytes_downloaded for r in reports),
    }


def run_cell(cfg: ExperimentConfig, cell: str, sim_cfg: SimConfig, out_dir: Path) -> dict:
    datasets = None
    if cfg.dataset != "synthetic":
        datasets = load_csv_datasets(cfg.dataset, seed=sim_cfg.seeds.partition)
    traces = parse_trace_file(cfg.trace_file, sim_cfg.trace_horizon) if cfg.trace_file else None
    table = load_profile_table(cfg.profile_table) if cfg.profile_table else builtin_table()
    sim = Simulation(sim_cfg, traces=traces, table=table, datasets=datasets)
    sim.run()

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "rounds.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for r in sim.reports:
            fh.write(json.dumps(r.to_dict(), separators=(",", ":")) + "\n")
    row = summary_row(cfg.config_name, cell, sim)
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow(row)
    per_device = dict(zip((d.device_id for d in sim.devices), sim.per_device_accuracy()))
    prefix = cfg.config_name
    write_fairness_csv(out_dir / f"{prefix}_fairness.csv", fairness(per_device.values()), per_device)
    write_failure_csv(out_dir / f"{prefix}_failures.csv", {sim_cfg.reporting_deadline: failure_breakdown(sim.reports)})
    bias = bias_report(sim.devices, sim.reports)
    write_bias_csv(out_dir / f"{prefix}_bias.csv", bias)
    write_participation_csv(out_dir / f"{prefix}_participation.csv", bias)
    return row


def _run_cell_job(args) -> tuple[str, dict | None, str | None]:
    cfg, cell, sim_cfg, out_dir = args
    try:
        return cell, run_cell(cfg, cell, sim_cfg, out_dir), None
    except Exception as exc:  # reported per cell, the sweep goes on
        return cell, None, f"{type(exc).__name__}: {exc}"


def output_root(explicit: str | None = None) -> Path:
    return Path(explicit or os.environ.get(OUTPUT_ENV) or "runs")


def run_experiment(cfg: ExperimentConfig, root: str | Path | None = None, parallel: int = 1) -> int:
    """Run every sweep cell; returns a process exit status."""
    base = output_root(str(root) if root is not None else None) / cfg.config_name
    jobs = [(cfg, cell, sim, base / cell) for cell, sim in expand_sweep(cfg)]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_cell_job, jobs))
    else:
        results = [_run_cell_job(j) for j in jobs]

    status = 0
    rows = []
    for cell, row, err in results:
        if err is not None:
            log.error("cell %s failed: %s", cell, err)
            status = 1
        else:
            log.info("cell %s: accuracy %.4f after %d rounds", cell, row["final_accuracy"], row["rounds"])
            rows.append(row)
    if rows:
        base.mkdir(parents=True, exist_ok=True)
        with open(base / "summary.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return status


# -- entry point -----------------------------------------------------------------------


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    return run_experiment(cfg, args.output, args.parallel)


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    cells = expand_sweep(cfg)
    mode = "unlimited (until target accuracy)" if cfg.unlimited else f"{cfg.num_rounds} rounds"
    print(f"{cfg.config_name}: OK, {len(cells)} cell(s), {mode}")
    return 0


def _cmd_dump_profiles(args) -> int:
    text = json.dumps(builtin_table().to_dict(), indent=2)
    if args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def _cmd_gen_traces(args) -> int:
    with open(args.spec, encoding="utf-8") as fh:
        data = json.load(fh)
    n = data.pop("n_devices", args.n_devices)
    horizon = data.pop("horizon", args.horizon)
    spec = _build(TraceGenSpec, data)
    write_trace_file(generate_traces(spec, n, horizon), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetfl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--parallel", type=int, default=1, help="sweep cells to run concurrently")
    run.add_argument("--output", default=None, help=f"output root (default ${OUTPUT_ENV} or ./runs)")
    run.set_defaults(func=_cmd_run)

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    val.set_defaults(func=_cmd_validate)

    dump = sub.add_parser("dump-profiles", help="print the built-in hardware profile table")
    dump.add_argument("--output", default=None)
    dump.set_defaults(func=_cmd_dump_profiles)

    gen = sub.add_parser("gen-traces", help="synthesize a JSON-lines trace file")
    gen.add_argument("spec")
    gen.add_argument("out")
    gen.add_argument("--n-devices", type=int, default=100)
    gen.add_argument("--horizon", type=int, default=7 * 24 * 3600)
    gen.set_defaults(func=_cmd_gen_traces)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except HetFLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
