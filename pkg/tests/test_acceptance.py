"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Tolerances and fixture sizes are pinned here; see README for the rationale.
"""

import dataclasses
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from hetfl import algorithms as alg
from hetfl.algorithms import CompressorSpec
from hetfl.cli import config_from_dict, run_experiment
from hetfl.engine import Seeds, SimConfig, Simulation, run_simulation
from hetfl.learning import (
    LearnerSpec,
    ModelWeights,
    PartitionSpec,
    init_weights,
    local_train,
    loss_and_grad,
    model_shapes,
)
from hetfl.metrics import bias_report, failure_breakdown
from hetfl.trace import StateCriteria, StateEntry, StateTrace, TraceGenSpec, availability, generate_traces

from helpers import random_trace, scan_mask, speed_table, timeline_mask

SMALL_PART = PartitionSpec(n_classes=4, feature_dim=5)


# -- 1 ---------------------------------------------------------------------------------


def test_c01_signsgd_ratio(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    ratios = []
    models = [
        (LearnerSpec(), 7, 8),  # 64 parameters
        (LearnerSpec(family="mlp1", hidden_units=8), 20, 8),  # 160 + 8 + 64 + 8 = 240
    ]
    for spec, d, c in models:
        shapes = model_shapes(spec, d, c)
        dim = sum(math.prod(s) for s in shapes)
        payload = alg.compress(rng.normal(size=dim), shapes, CompressorSpec(kind="signsgd"))
        ratios.append(Fraction(payload.byte_size, 4 * dim))
    for k in range(1, 200):
        payload = alg.compress_signsgd(rng.normal(size=8 * k), 0.001)
        ratios.append(Fraction(alg.compression_ratio(payload, 32 * k)).limit_denominator(10**6))
    elapsed = time.perf_counter() - t0
    ok = all(r == Fraction(1, 32) for r in ratios) and elapsed < 1.0
    record(1, ok, f"{len(ratios)} models, all ratios == 1/32: {ok}, {elapsed:.2f}s")
    assert ok


# -- 2 ---------------------------------------------------------------------------------


def test_c02_round_semantics(record):
    base = {"config_name": "c2", "dataset": "synthetic", "model": "logreg", "n_devices": 20,
            "devices_per_round": 10, "trace_horizon": 86_400, "heterogeneity": "unaware",
            "partition": {"n_classes": 4, "feature_dim": 5}}
    exact = {}
    for k in (1, 4, 7):
        cfg = config_from_dict({**base, "num_rounds": k})
        exact[k] = len(run_simulation(cfg.sim))
    unl = config_from_dict({**base, "num_rounds": -1, "target_accuracy": 0.6})
    reports = run_simulation(unl.sim)
    accs = [r.global_accuracy for r in reports]
    ok_exact = all(exact[k] == k for k in exact)
    ok_unl = unl.unlimited and accs[-1] >= 0.6 and all(a < 0.6 for a in accs[:-1])
    ok = ok_exact and ok_unl
    record(2, ok, f"fixed rounds {exact}; unlimited stopped after {len(reports)} rounds at acc {accs[-1]:.3f}")
    assert ok


# -- 3 ---------------------------------------------------------------------------------


def test_c03_availability_oracle(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    crit = StateCriteria()
    mismatches = 0
    for i in range(1000):
        tr = random_trace(rng, int(rng.integers(1, 60)), 10_000, f"d{i}")
        if not np.array_equal(timeline_mask(availability(tr, crit)), scan_mask(tr, crit)):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 30
    record(3, ok, f"1000 traces, {mismatches} mismatches, {elapsed:.1f}s")
    assert ok


# -- 4 ---------------------------------------------------------------------------------


def coordinate_rel_error(a, b):
    scale = np.maximum(np.abs(a), np.abs(b))
    tiny = scale < 1e-8
    rel = np.where(tiny, 0.0, np.abs(a - b) / np.where(tiny, 1.0, scale))
    return float(rel.max()), float(np.abs(a - b)[tiny].max(initial=0.0))


def test_c04_gradient_check(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst, worst_tiny = 0.0, 0.0
    h = 1e-5
    for family in ("logreg", "mlp1"):
        for _ in range(20):
            d, c, n = int(rng.integers(1, 11)), int(rng.integers(2, 5)), int(rng.integers(1, 51))
            spec = LearnerSpec(family=family, hidden_units=int(rng.integers(1, 8)), l2=float(rng.choice([0, 0.01])))
            shapes = model_shapes(spec, d, c)
            w = rng.normal(0, 0.5, sum(math.prod(s) for s in shapes))
            x, y = rng.normal(size=(n, d)), rng.integers(0, c, size=n)
            g = loss_and_grad(w, shapes, family, x, y, spec.l2)[1]
            fd = np.empty_like(w)
            for i in range(w.size):
                e = np.zeros_like(w)
                e[i] = h
                fd[i] = (loss_and_grad(w + e, shapes, family, x, y, spec.l2)[0]
                         - loss_and_grad(w - e, shapes, family, x, y, spec.l2)[0]) / (2 * h)
            rel, tiny = coordinate_rel_error(g, fd)
            worst, worst_tiny = max(worst, rel), max(worst_tiny, tiny)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and worst_tiny < 1e-9 and elapsed < 10
    record(4, ok, f"max relative coordinate error {worst:.2e} over 40 instances, {elapsed:.1f}s")
    assert ok


# -- 5 ---------------------------------------------------------------------------------


def test_c05_algorithm_reductions(record):
    rng = np.random.default_rng(5)
    # q-FedAvg with q = 0 is the plain mean of deltas
    g = ModelWeights(rng.normal(size=30), ((30,),))
    deltas = rng.normal(size=(6, 30))
    ups = [alg.ModelUpdate(f"d{i}", alg.DenseDelta(deltas[i]), int(rng.integers(1, 9)), float(rng.uniform(0.2, 3)))
           for i in range(6)]
    q0 = alg.qfedavg_aggregate(g, ups, 0.0, 1.7).vector
    err_q = float(np.max(np.abs(q0 - (g.vector + deltas.mean(axis=0)))))

    # FedProx with mu = 0 and full epochs is FedAvg local training, bit for bit
    spec = LearnerSpec(learning_rate=0.1, batch_size=6)
    x, y = rng.normal(size=(37, 5)), rng.integers(0, 3, size=37)
    from hetfl.learning import LocalDataset

    ds = LocalDataset("dev", x, y, x, y)
    w0 = init_weights(spec, 5, 3, rng).replace(rng.normal(size=18))
    prox = alg.fedprox_local_train(w0, ds, spec, 0.0, 4, 4, np.random.default_rng(11)).delta()
    plain, _ = local_train(w0, ds, spec, 4, np.random.default_rng(11))
    prox_identical = np.array_equal(prox, plain.vector - w0.vector)

    # one device holding all data: a FedAvg round equals standalone SGD with the device's stream
    cfg = SimConfig(n_devices=1, devices_per_round=1, num_rounds=1, local_epochs=3, heterogeneity="unaware",
                    reporting_deadline=10_000, partition=SMALL_PART, learner=LearnerSpec(batch_size=4),
                    seeds=Seeds(1, 2, 3))
    sim = Simulation(cfg)
    start = sim.weights.vector.copy()
    data = sim.devices[0].dataset
    sim.run()
    stream = np.random.default_rng([3, 1, 0])  # engine seed, device stream label, device index
    stream.random(), stream.random()  # downlink and uplink bandwidth draws
    w = start.copy()
    for _ in range(3):
        order = stream.permutation(data.n_train)
        for s in range(0, data.n_train, 4):
            idx = order[s : s + 4]
            w = w - 0.05 * loss_and_grad(w, sim.weights.shapes, "logreg", data.x_train[idx], data.y_train[idx])[1]
    err_sgd = float(np.max(np.abs(sim.weights.vector - w)))

    ok = err_q < 1e-9 and prox_identical and err_sgd < 1e-12
    record(5, ok, f"q=0 err {err_q:.1e}; fedprox(mu=0) bit-identical {prox_identical}; "
                  f"single-device vs SGD oracle err {err_sgd:.1e}")
    assert ok


# -- 6 ---------------------------------------------------------------------------------


def test_c06_eckart_young(record):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(50):
        m = rng.normal(size=(20, 30))
        r = int(rng.integers(1, 20))
        sv = np.linalg.svd(m, compute_uv=False)
        approx = alg.compress_structured(m.ravel(), ((20, 30),), r).to_dense()
        worst = max(worst, abs(np.linalg.norm(approx - m.ravel()) - math.sqrt(float(np.sum(sv[r:] ** 2)))))
    ok = worst < 1e-8
    record(6, ok, f"50 random 20x30 matrices, max |error - SVD tail| {worst:.1e}")
    assert ok


# -- 7 and 9 -------------------------------------------------------------------------------

ARMS = ("unaware", "no_state", "no_hardware", "aware")
HET_SEEDS = range(5)


def heterogeneity_config(arm: str, seed: int) -> SimConfig:
    # dwell means scaled so about 40% of the day satisfies the criteria
    sc = 30
    return SimConfig(
        n_devices=200,
        devices_per_round=100,
        reporting_deadline=50,
        local_epochs=1,
        num_rounds=-1,
        target_accuracy=0.64,
        max_rounds=300,
        heterogeneity=arm,
        partition=PartitionSpec(n_classes=10, feature_dim=20, dirichlet_alpha=0.5, class_sep=0.12,
                                class_radius_spread=7),
        learner=LearnerSpec(learning_rate=0.01, batch_size=10),
        trace_gen=TraceGenSpec(screen_on_mean=sc, screen_off_mean=4 * sc, wifi_mean=5 * sc, cell_mean=2 * sc,
                               charging_mean=7 * sc, not_charging_mean=3 * sc),
        trace_horizon=86_400,
        seeds=Seeds(seed, seed + 100, seed + 200),
    )


@pytest.fixture(scope="module")
def arm_runs():
    t0 = time.perf_counter()
    out = {}
    for seed in HET_SEEDS:
        for arm in ARMS:
            sim = Simulation(heterogeneity_config(arm, seed), table=speed_table())
            reports = sim.run()
            out[seed, arm] = (sim.converged(), len(reports), reports[-1].wall_clock_end)
    avail = []
    cfg = heterogeneity_config("aware", 0)
    spec = dataclasses.replace(cfg.trace_gen, seed=cfg.seeds.traces)
    for tr in generate_traces(spec, cfg.n_devices, cfg.trace_horizon):
        avail.append(availability(tr, cfg.criteria).total() / tr.horizon)
    return out, float(np.mean(avail)), time.perf_counter() - t0


def test_c07_directional_heterogeneity(record, arm_runs):
    runs, avail, elapsed = arm_runs
    rows, ok = [], True
    for seed in HET_SEEDS:
        ca, ra, ta = runs[seed, "aware"]
        cu, ru, tu = runs[seed, "unaware"]
        good = ca and cu and ta / tu > 1 and ra / ru >= 1
        ok &= good
        rows.append(f"s{seed}: time x{ta / tu:.2f} rounds x{ra / ru:.2f}")
    ok &= elapsed < 300
    record(7, ok, f"availability {avail:.0%}; " + "; ".join(rows) + f"; {elapsed:.0f}s")
    assert ok


def test_c09_breakdown_arms(record, arm_runs):
    runs, _, _ = arm_runs
    rows, ok = [], True
    for seed in HET_SEEDS:
        t = {arm: runs[seed, arm][2] for arm in ARMS}
        conv = all(runs[seed, arm][0] for arm in ARMS)
        good = conv and all(t["unaware"] <= t[arm] <= t["aware"] for arm in ("no_state", "no_hardware"))
        ok &= good
        rows.append(f"s{seed}: {t['unaware']}<={t['no_state']},{t['no_hardware']}<={t['aware']}s")
    record(9, ok, "; ".join(rows))
    assert ok


# -- 8 ---------------------------------------------------------------------------------

DEADLINES = (45, 60, 90, 135, 200, 300)


def test_c08_deadline_sweep(record):
    t0 = time.perf_counter()
    ok, rows = True, []
    for seed in range(3):
        fbs = []
        for dl in DEADLINES:
            cfg = SimConfig(n_devices=200, devices_per_round=50, reporting_deadline=dl, local_epochs=5,
                            num_rounds=30, trace_horizon=86_400, seeds=Seeds(seed, seed + 100, seed + 200))
            fbs.append(failure_breakdown(run_simulation(cfg, table=speed_table())))
        overall = [fb.overall for fb in fbs]
        tight = fbs[0]
        mono = all(b <= a for a, b in zip(overall, overall[1:]))
        feasible = tight.failures < tight.attempts
        dominant = tight.training_share > max(tight.network_share, tight.interruption_share)
        ok &= mono and feasible and dominant
        rows.append(f"s{seed}: " + "/".join(f"{v:.3f}" for v in overall) + f" training share {tight.training_share:.2f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 180
    record(8, ok, f"deadlines {DEADLINES}: " + "; ".join(rows) + f"; {elapsed:.0f}s")
    assert ok


# -- 10 --------------------------------------------------------------------------------


def test_c10_participant_bias(record):
    base = dict(n_devices=100, devices_per_round=50, num_rounds=200, trace_horizon=86_400, partition=SMALL_PART)
    sim = Simulation(SimConfig(heterogeneity="unaware", **base))
    sim.run()
    fair = bias_report(sim.devices, sim.reports)
    # 30 devices whose phones are never idle, charging and on wifi
    dead = [StateTrace(f"dead{i}", (StateEntry(f"dead{i}", 0, "on", "unlocked", "4g", False, 50.0),), 86_400)
            for i in range(30)]
    live = generate_traces(TraceGenSpec(seed=1), 70, 86_400)
    sim = Simulation(SimConfig(heterogeneity="aware", **base), traces=live + dead)
    sim.run()
    biased = bias_report(sim.devices, sim.reports)
    ok = 0.28 <= fair.top30_share <= 0.36 and biased.top30_share > fair.top30_share and biased.never_participated > 0
    record(10, ok, f"unaware top-30% share {fair.top30_share:.3f}; biased {biased.top30_share:.3f}, "
                   f"never participated {biased.never_participated:.2f}")
    assert ok


# -- 11 --------------------------------------------------------------------------------


def test_c11_determinism(record, tmp_path):
    doc = {
        "config_name": "det", "dataset": "synthetic", "model": "logreg", "num_rounds": 6,
        "n_devices": 40, "devices_per_round": 20, "reporting_deadline": 60, "local_epochs": 3,
        "trace_horizon": 86_400, "partition": {"n_classes": 4, "feature_dim": 5},
        "sweep": [
            {"field": "heterogeneity", "values": ["aware", "no_state"]},
            {"field": "compressor.kind", "values": ["none", "gdrop", "signsgd", "structured"]},
        ],
    }
    cfg = config_from_dict(doc)
    assert run_experiment(cfg, tmp_path / "a") == 0
    assert run_experiment(cfg, tmp_path / "b", parallel=2) == 0
    cells = sorted(p.name for p in (tmp_path / "a" / "det").iterdir() if p.is_dir())
    same = [
        (tmp_path / "a" / "det" / c / "rounds.jsonl").read_bytes() == (tmp_path / "b" / "det" / c / "rounds.jsonl").read_bytes()
        for c in cells
    ]
    for agg in ("qfedavg", "fedprox"):
        cfg2 = config_from_dict({**doc, "config_name": f"det_{agg}", "aggregator": {"kind": agg}, "sweep": []})
        run_experiment(cfg2, tmp_path / "a")
        run_experiment(cfg2, tmp_path / "b")
        cells.append(f"{agg}")
        same.append((tmp_path / "a" / f"det_{agg}" / "base" / "rounds.jsonl").read_bytes()
                    == (tmp_path / "b" / f"det_{agg}" / "base" / "rounds.jsonl").read_bytes())
    ok = len(cells) == 10 and all(same)
    record(11, ok, f"{sum(same)}/{len(cells)} configs byte-identical on rerun")
    assert ok
