"""Acceptance gate: every criterion at its stated tolerance, one summary line each.

The experiment-level criteria share one reduced-scale run over three seeds.
"""

import math
import time
from itertools import product

import numpy as np
import pytest
from conftest import random_sequence, record_criterion

from pedscl.config import SEQUENCE_ORDERS, ExperimentConfig
from pedscl.continual import Coreset, aggregate_task, collect, initial_params, update_coreset
from pedscl.core import Dataset
from pedscl.experiment import Cell, prepare, run_cell
from pedscl.learn import OptState, TaskAnchor, ewc_loss, estimate_fim, train
from pedscl.metrics import ade, fde, final_values, forgotten_values, mann_whitney_u
from pedscl.model import Architecture, SequenceBatch, init_params, sequence_gradients
from pedscl.sim import frames, make_scenario, run_scenario
from pedscl.sim.dynamics import _rect_closest

SEEDS = (7, 8, 9)
MAIN = ("square", "obstacle", "hall")
ORDERS = [tuple(o) for o in SEQUENCE_ORDERS]
SMALL = Architecture(grid=4, n_social=2, vel_width=3, occ_width=4, soc_width=3, hidden=5, pred_steps=3)


@pytest.fixture(scope="module")
def grid():
    """Records of every cell the experiment criteria need, plus per-seed runtimes."""
    config = ExperimentConfig.reduced()
    records, seconds = {}, {}
    for seed in SEEDS:
        start = time.perf_counter()
        ws = prepare(config, seed)
        for strategy in ("vanilla", "ewc", "coreset", "scl"):
            records[(strategy, MAIN, seed)] = run_cell(ws, Cell(strategy, MAIN, 6, seed)).records
        seconds[seed] = time.perf_counter() - start
        for order in ORDERS:
            records[("cv", order, seed)] = run_cell(ws, Cell("cv", order, 6, seed)).records
            if order != MAIN:
                records[("scl", order, seed)] = run_cell(ws, Cell("scl", order, 6, seed)).records
        for n in (10, 20):
            records[(f"scl-{n}", MAIN, seed)] = run_cell(ws, Cell("scl", MAIN, n, seed)).records
    return records, seconds


def forgotten(records, label, seq=MAIN):
    """Forgotten ADE and FDE pooled over seeds (per-example increases)."""
    a = np.concatenate([forgotten_values(records[(label, seq, s)], seq)[1] for s in SEEDS])
    f = np.concatenate([forgotten_values(records[(label, seq, s)], seq)[2] for s in SEEDS])
    return a.mean(), f.mean(), a, f


def seq_end(records, label, seq):
    return np.concatenate([final_values(records[(label, seq, s)], seq, env)[0] for s in SEEDS for env in seq]).mean()


def square_ade(records, label, phase):
    return np.concatenate([
        r.ade_values for s in SEEDS for r in records[(label, MAIN, s)] if r.env == "square" and r.phase == phase
    ]).mean()


def test_criterion_01_ordinal_forgetting(grid):
    records, seconds = grid
    f = {k: forgotten(records, k)[0] for k in ("vanilla", "ewc", "coreset", "scl")}
    ok = (
        f["scl"] < f["ewc"] < f["vanilla"]
        and f["scl"] < f["coreset"] + 0.02
        and f["vanilla"] >= 2 * f["scl"]
        and max(seconds.values()) < 15 * 60
    )
    detail = ", ".join(f"{k} {v:+.3f}" for k, v in f.items())
    record_criterion(1, ok, f"forgotten ADE {detail}; slowest seed {max(seconds.values()):.0f} s")


def test_criterion_02_order_robustness(grid):
    records, _ = grid
    ends = {"-".join(o): seq_end(records, "scl", o) for o in ORDERS}
    spread = max(ends.values()) - min(ends.values())
    detail = ", ".join(f"{k} {v:.3f}" for k, v in ends.items())
    record_criterion(2, spread <= 0.05, f"SCL seq-end ADE {detail}; range {spread:.3f} m")


def test_criterion_03_cv_never_forgets(grid):
    records, _ = grid
    values = []
    for order, seed in product(ORDERS, SEEDS):
        _, da, df = forgotten_values(records[("cv", order, seed)], order)
        values += [da, df]
    all_zero = all(np.all(v == 0.0) and not np.signbit(v).any() for v in values)
    record_criterion(3, all_zero, f"CV forgotten ADE/FDE exactly 0 over {len(ORDERS)} orders x {len(SEEDS)} seeds")


def test_criterion_04_forgetting_curve(grid):
    records, _ = grid
    rise = {k: square_ade(records, k, 1) / square_ade(records, k, 0) - 1.0 for k in ("vanilla", "scl")}
    ok = rise["vanilla"] >= 0.5 and rise["scl"] <= 0.15
    record_criterion(4, ok, f"square ADE after obstacle phase: vanilla {rise['vanilla']:+.1%}, SCL {rise['scl']:+.1%}")


def _loss(params, batch):
    return float(sequence_gradients(params, batch)[0].mean())


def test_criterion_05_gradient_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, h = 0.0, 1e-5
    for _ in range(100):
        params = init_params(SMALL, rng)
        params.flat += rng.uniform(0.0, 0.3) * rng.normal(size=params.size)
        seqs = [random_sequence(SMALL, rng, int(rng.integers(1, 6))) for _ in range(1)]
        batch = SequenceBatch.from_sequences(seqs)
        _, grad = sequence_gradients(params, batch)
        theta = params.flat
        for i in range(params.size):
            old = theta[i]
            theta[i] = old + h
            up = _loss(params, batch)
            theta[i] = old - h
            down = _loss(params, batch)
            theta[i] = old
            numeric = (up - down) / (2 * h)
            worst = max(worst, abs(numeric - grad[i]) / max(abs(numeric), abs(grad[i]), 1e-6))
    ewc_worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 20))
        anchors = [TaskAnchor(k, rng.normal(size=n), rng.random(n)) for k in range(int(rng.integers(1, 4)))]
        theta, lam = rng.normal(size=n), 10 ** rng.uniform(-2, 2)
        _, g = ewc_loss(theta, anchors, lam)
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1e-6
            numeric = (ewc_loss(theta + e, anchors, lam)[0] - ewc_loss(theta - e, anchors, lam)[0]) / 2e-6
            ewc_worst = max(ewc_worst, abs(numeric - g[i]))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and ewc_worst < 1e-6 and elapsed < 120
    record_criterion(5, ok, f"TBPTT max rel err {worst:.2e}; EWC max abs err {ewc_worst:.2e}; {elapsed:.0f} s")


def test_criterion_06_ewc_anchoring():
    config = ExperimentConfig.reduced()
    theta = initial_params(config, 3)
    task1 = collect("square", theta, config, 3)
    after1 = train(theta, task1, [], OptState.create(theta.size, config.lr, config.l2), config.epochs, np.random.default_rng(0))
    anchor = TaskAnchor(0, after1.flat.copy(), estimate_fim(after1, task1))
    task2 = collect("obstacle", after1, config, 3)
    after2 = train(after1, task2, [anchor], OptState.create(theta.size, config.lr, config.l2), config.epochs,
                   np.random.default_rng(1), ewc_lambda=1e12)
    d = after2.flat - anchor.theta
    rms = math.sqrt(float((anchor.fisher * d * d).sum() / anchor.fisher.sum()))
    record_criterion(6, rms < 1e-3, f"F-weighted RMS deviation from task-1 anchor {rms:.2e} at lambda 1e12")


def brute_ade_fde(pred, true):
    dists = [math.sqrt((p[0] - t[0]) ** 2 + (p[1] - t[1]) ** 2) for p, t in zip(pred, true)]
    return sum(dists) / len(dists), dists[-1]


def brute_u(a, b):
    return sum(2 if x > y else 1 if x == y else 0 for x in a for y in b) / 2


def test_criterion_07_metric_oracles():
    rng = np.random.default_rng(77)
    worst, u_mismatch = 0.0, 0
    for _ in range(1000):
        steps = int(rng.integers(1, 16))
        pred, true = rng.normal(size=(steps, 2)) * 3, rng.normal(size=(steps, 2)) * 3
        ra, rf = brute_ade_fde(pred.tolist(), true.tolist())
        worst = max(worst, abs(ade(pred, true) - ra), abs(fde(pred, true) - rf))
        a = rng.integers(0, 10, size=int(rng.integers(1, 12))).tolist()
        b = rng.integers(0, 10, size=int(rng.integers(1, 12))).tolist()
        u_mismatch += mann_whitney_u(a, b)[0] != brute_u(a, b)
    ok = worst <= 1e-12 and u_mismatch == 0
    record_criterion(7, ok, f"ADE/FDE max abs diff {worst:.1e}; U mismatches {u_mismatch} of 1000")


def test_criterion_08_coreset_and_buffer():
    rng = np.random.default_rng(8)
    sizes_ok = True
    for trial in range(10):
        coreset = Coreset(100)
        for k in range(10):
            task = Dataset([random_sequence(SMALL, rng, 2, agent_id=1000 * k + i) for i in range(int(rng.integers(20, 80)))])
            coreset = update_coreset(coreset, task, 20, rng)
            sizes_ok &= len(coreset) <= 100 and (k < 4 or len(coreset) == 100)
    arch = Architecture()
    mismatches = checked = 0
    for name in ("square", "obstacle", "hall"):
        sc = make_scenario(name)
        stream = list(frames(run_scenario(sc, 400, 5)))
        by_tick = {fr.tick: fr for fr in stream}
        data = aggregate_task(iter(stream), sc.map, init_params(arch, rng), 400, arch)
        for seq in data:
            for k, t in enumerate(seq.ticks):
                rows = [by_tick[int(t) + 1 + j] for j in range(arch.pred_steps)]
                truth = np.stack([fr.vel[np.flatnonzero(fr.ids == seq.agent_id)[0]] for fr in rows])
                mismatches += not np.array_equal(seq.target[k], truth)
                checked += 1
    ok = sizes_ok and mismatches == 0 and checked > 0
    record_criterion(8, ok, f"coreset sizes {'ok' if sizes_ok else 'violated'}; {mismatches} of {checked} targets differ")


def test_criterion_09_simulator_safety():
    clearance, closest = math.inf, math.inf
    radius = None
    for n, episode in product((6, 10, 20), range(10)):
        sc = make_scenario("obstacle", n)
        radius = sc.radius
        rects = sc.obstacle_array
        for st in run_scenario(sc, 300, 1000 * n + episode):
            p = st.pos[st.active]
            _, d = _rect_closest(p, rects)
            clearance = min(clearance, float((d - sc.radius).min()))
            gaps = np.hypot(p[:, None, 0] - p[None, :, 0], p[:, None, 1] - p[None, :, 1])
            np.fill_diagonal(gaps, np.inf)
            closest = min(closest, float(gaps.min()))
    ok = clearance >= 0.0 and closest >= 2 * radius - 0.05
    record_criterion(9, ok, f"min obstacle clearance {clearance:.2e} m; min pairwise distance {closest:.3f} m")


def test_criterion_10_dense_scaling(grid):
    records, _ = grid
    base = forgotten(records, "scl")[0]
    dense = {n: forgotten(records, f"scl-{n}")[0] for n in (10, 20)}
    ok = all(v <= base + 0.05 for v in dense.values())
    record_criterion(10, ok, f"SCL forgotten ADE n=6 {base:+.3f}, n=10 {dense[10]:+.3f}, n=20 {dense[20]:+.3f}")
