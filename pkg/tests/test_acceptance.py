"""Acceptance gate: one test per criterion, reported as PASS/FAIL lines at the end of the run."""

import collections
import json
import math
import signal
import subprocess
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import mpmath
import numpy as np
import pytest

from osprey.ackley import AckleyParams, LognormalDelay, ackley
from osprey.broker import serve
from osprey.client import BrokerClient, as_completed
from osprey.dynamics import run_fixed_queue, sawtooth_stats
from osprey.experiment import ExperimentPlan, ThreadLauncher, run_experiment
from osprey.gpr import LENGTHSCALE_GRID, gpr_fit, gpr_predict, gpr_predict_grad
from osprey.pool import PoolConfig, get_handler, run_pool
from osprey.protocol import PollPolicy, WorkQueryResponse
from osprey.store import TaskStatus
from osprey.trace import read_pool_trace

from conftest import FAST, sleep_payload

criterion = pytest.mark.criterion


def wait_until(pred, timeout=30.0, step=0.01):
    deadline = time.monotonic() + timeout
    while not pred():
        if time.monotonic() > deadline:
            raise AssertionError("condition not reached in time")
        time.sleep(step)


class CountingHandler:
    """Records every invocation by payload so duplicates are visible."""

    def __init__(self):
        self.calls = collections.Counter()
        self.order = []
        self._lock = threading.Lock()

    def __call__(self, payload):
        with self._lock:
            self.calls[payload] += 1
            self.order.append(payload)
        return payload


@criterion(1, "exactly-once: 3 pools x 8 workers, 750 trivial tasks, < 60 s")
def test_exactly_once(broker):
    t0 = time.monotonic()
    handler = CountingHandler()
    with BrokerClient(broker.address, FAST) as c:
        futs = [c.submit_task("c1", 0, f"task-{i}") for i in range(750)]
        pools = [
            run_pool(PoolConfig(f"p{k}", 0, 8, 8, 1, broker.address, FAST), handler) for k in range(3)
        ]
        results = {f.task_id: f.result() for f in as_completed(futs, timeout=60)}
        reports = [p.stop() for p in pools]
        statuses = c.status([f.task_id for f in futs])
    elapsed = time.monotonic() - t0
    assert len(results) == 750
    assert all(results[f.task_id] == f"task-{i}" for i, f in enumerate(futs))
    assert set(handler.calls) == {f"task-{i}" for i in range(750)}
    assert set(handler.calls.values()) == {1}
    assert {s for _, s, _ in statuses} == {TaskStatus.COMPLETE}
    assert sum(r.executed for r in reports) == 750 and all(r.abandoned == 0 for r in reports)
    assert broker.broker.store.check_consistency() == []
    assert elapsed < 60


@criterion(2, "priority fidelity: 1000 random priorities, one 1-worker pool, exact order")
def test_priority_fidelity(broker):
    rng = np.random.default_rng(2)
    prios = rng.integers(0, 100, size=1000).tolist()
    handler = CountingHandler()
    with BrokerClient(broker.address, FAST) as c:
        futs = [c.submit_task("c2", 0, str(i), priority=p) for i, p in enumerate(prios)]
        pool = run_pool(PoolConfig("solo", 0, 1, 1, 1, broker.address, FAST), handler)
        list(as_completed(futs, timeout=120))
        pool.stop()
    expected = sorted(range(1000), key=lambda i: (-prios[i], futs[i].task_id))
    assert [int(p) for p in handler.order] == expected


@criterion(3, "deficit example: batch 33 owning 30 requests exactly 3")
def test_deficit_example(broker):
    with BrokerClient(broker.address, FAST) as c:
        futs = [c.submit_task("c3", 0, sleep_payload(2.0)) for _ in range(30)]
        pool = run_pool(PoolConfig("p33", 0, 33, 33, 1, broker.address, FAST), get_handler("sleep"))
        wait_until(lambda: any(d.owned == 30 for d in pool.decisions), timeout=10)
        futs += [c.submit_task("c3", 0, sleep_payload(0.0)) for _ in range(3)]
        list(as_completed(futs, timeout=30))
        pool.stop()
    first, second = pool.decisions[:2]
    assert (first.owned, first.requested, first.received) == (0, 33, 30)
    assert (second.owned, second.requested) == (30, 3)
    assert all(d.requested == 3 for d in pool.decisions if d.owned == 30)


@criterion(4, "sawtooth at desk scale: 8 workers, 200 tasks, median delay 0.5 s, 50 ms buckets")
def test_sawtooth(tmp_path):
    configs = [(12, 1), (8, 1), (8, 4)]
    params = AckleyParams(delay=LognormalDelay(math.log(0.5), 0.5))

    def one(cfg):
        batch, thr = cfg
        return run_fixed_queue(200, 8, batch, thr, params, PollPolicy(0.05, 0.5),
                               workdir=tmp_path / f"b{batch}t{thr}")

    with ThreadPoolExecutor(3) as ex:
        traces = list(ex.map(one, configs))
    stats = {cfg: sawtooth_stats(ev, 8, cfg[1], 0.05) for cfg, ev in zip(configs, traces)}
    for cfg, s in stats.items():
        print(cfg, s)
    assert all(len(ev) == 200 for ev in traces)
    assert stats[(12, 1)].full_fraction >= 0.80
    assert stats[(8, 1)].below_fraction >= 0.10
    assert stats[(8, 4)].dip_level == 5 and stats[(8, 4)].dips >= 3


@criterion(5, "reprioritization arithmetic: 750 tasks, groups of 50, rounds 700..50 as permutations")
def test_reprioritization_rounds(broker, tmp_path):
    poll = PollPolicy(0.05, 0.5)
    sched = [(k, PoolConfig(f"pool-{i + 1}", 0, 8, 8, 1, poll=poll)) for i, k in enumerate((0, 2, 4))]
    plan = ExperimentPlan(750, 50, sched, seed=0)
    params = AckleyParams(delay=LognormalDelay(enabled=False))
    rep = run_experiment(plan, params, broker.address, ThreadLauncher(), trace_dir=tmp_path, poll=poll)
    assert rep.round_sizes == list(range(700, 0, -50))
    for r in rep.reprio_log:
        assert sorted(p for _, _, p in r.assignments) == list(range(1, len(r.assignments) + 1))
    assert [p["after_round"] for p in rep.pools] == [0, 2, 4]
    assert len({t for t, _ in rep.completions}) == 750


def ackley_oracle(x):
    """Ackley in 50-digit arithmetic, written independently of the package."""
    mpmath.mp.dps = 50
    d = len(x)
    xs = [mpmath.mpf(float(v)) for v in x]
    s1 = mpmath.fsum(v * v for v in xs) / d
    s2 = mpmath.fsum(mpmath.cos(2 * mpmath.pi * v) for v in xs) / d
    return float(-20 * mpmath.exp(-mpmath.mpf("0.2") * mpmath.sqrt(s1)) - mpmath.exp(s2) + 20 + mpmath.e)


@criterion(6, "Ackley: f(0)=0, 100-point oracle within 1e-9, evenness at 1000 points")
def test_ackley_correctness():
    rng = np.random.default_rng(6)
    assert abs(ackley(np.zeros(4))) <= 1e-12
    pts = rng.uniform(-32.768, 32.768, size=(100, 4))
    assert max(abs(ackley(x) - ackley_oracle(x)) for x in pts) <= 1e-9
    pts = rng.uniform(-32.768, 32.768, size=(1000, 4))
    assert all(ackley(x) == ackley(-x) for x in pts)


@criterion(7, "GPR: interpolation within 10 sigma_n, LML-maximizing lengthscale, gradient within 1e-4")
def test_gpr_core():
    rng = np.random.default_rng(7)
    X = rng.uniform(-32.768, 32.768, size=(60, 4))
    y = np.array([ackley(x) for x in X])
    s = gpr_fit(X, y, bounds=(-32.768, 32.768))
    resid = np.abs(gpr_predict(s, X) - y) / s.y_std
    assert resid.max() <= 10 * math.sqrt(s.noise_var)

    # exhaustive grid check with an independent dense computation
    Xs, ys = s.scale(X), (y - s.y_mean) / s.y_std
    d2 = ((Xs[:, None] - Xs[None]) ** 2).sum(-1)

    def lml(ell):
        K = np.exp(-0.5 * d2 / ell**2) + s.noise_var * np.eye(len(ys))
        return -0.5 * ys @ np.linalg.solve(K, ys) - 0.5 * np.linalg.slogdet(K)[1] - 0.5 * len(ys) * math.log(2 * math.pi)

    scores = {ell: lml(ell) for ell in LENGTHSCALE_GRID}
    assert s.lengthscale == max(scores, key=scores.get)

    for seed in range(20):
        r = np.random.default_rng(700 + seed)
        X1 = r.uniform(-2, 2, size=(10, 1))
        s1 = gpr_fit(X1, np.sin(2 * X1[:, 0]) + r.normal(0, 0.05, 10))
        p = r.uniform(-2, 2, size=(1, 1))
        h = 1e-5
        fd = (gpr_predict(s1, p + h)[0] - gpr_predict(s1, p - h)[0]) / (2 * h)
        g = gpr_predict_grad(s1, p)[0, 0]
        assert abs(g - fd) <= 1e-4 * max(abs(fd), 1e-3)


@criterion(8, "optimization benefit: 10 paired seeds, GPR mean best after 50% strictly lower")
def test_optimization_benefit(tmp_path):
    poll = PollPolicy(0.1, 0.5)
    params = AckleyParams(dim=4)

    def one(seed, reprio):
        server = serve("127.0.0.1:0", tmp_path / f"s{seed}-{int(reprio)}")
        try:
            plan = ExperimentPlan(150, 20, [(0, PoolConfig("p", 0, 4, 4, 1, poll=poll))], seed, reprio)
            return run_experiment(plan, params, server.address, ThreadLauncher(), poll=poll)
        finally:
            server.stop()

    with ThreadPoolExecutor(20) as ex:
        jobs = {(s, rp): ex.submit(one, s, rp) for s in range(10) for rp in (True, False)}
        runs = {k: f.result() for k, f in jobs.items()}
    gpr = [runs[s, True].best_after(75) for s in range(10)]
    static = [runs[s, False].best_after(75) for s in range(10)]
    print("gpr   ", np.round(gpr, 3), np.mean(gpr))
    print("static", np.round(static, 3), np.mean(static))
    for r in runs.values():
        assert len(r.completions) == 150
        assert all(a >= b for a, b in zip(r.best_trajectory, r.best_trajectory[1:]))
    assert np.mean(gpr) < np.mean(static)


@criterion(9, "fault tolerance: SIGKILL a pool with >= 5 Running, exact requeue, fresh pool completes")
def test_fault_tolerance(broker, tmp_path):
    store = broker.broker.store
    with BrokerClient(broker.address, FAST) as c:
        futs = [c.submit_task("c9", 0, sleep_payload(2.0, i=i)) for i in range(24)]
        victim = subprocess.Popen(
            [sys.executable, "-m", "osprey.pool", "run", "--id", "victim", "--broker", broker.address,
             "--workers", "8", "--batch-size", "8", "--handler", "sleep", "--delay", "0.02", "--timeout", "0.2",
             "--trace", str(tmp_path / "victim.csv")],
            stdout=subprocess.PIPE, text=True,
        )

        def victim_running():
            return [f.task_id for f in futs
                    if (t := store.get_task(f.task_id))["status"] is TaskStatus.RUNNING and t["worker_pool_id"] == "victim"]

        try:
            wait_until(lambda: len(victim_running()) >= 5, timeout=20)
        finally:
            victim.send_signal(signal.SIGKILL)
            victim.wait(10)
        in_flight = victim_running()
        done_before = {f.task_id for f in futs if f.status() is TaskStatus.COMPLETE}
        assert len(in_flight) >= 5
        assert c.requeue_pool("victim") == len(in_flight)

        fresh = run_pool(PoolConfig("fresh", 0, 8, 8, 1, broker.address, FAST), get_handler("sleep"),
                         tmp_path / "fresh.csv")
        results = {f.task_id: f.result() for f in as_completed(futs, timeout=60)}
        fresh.stop()
    assert len(results) == 24
    assert all(json.loads(results[f.task_id])["i"] == i for i, f in enumerate(futs))
    reported = [e.task_id for e in read_pool_trace(tmp_path / "victim.csv")[1]]
    reported += [e.task_id for e in read_pool_trace(tmp_path / "fresh.csv")[1]]
    assert sorted(reported) == sorted(f.task_id for f in futs)  # each reported Complete exactly once
    assert set(in_flight) <= {e.task_id for e in read_pool_trace(tmp_path / "fresh.csv")[1]}
    assert done_before.isdisjoint(in_flight)
    assert store.check_consistency() == []


@criterion(10, "polling contract: empty queue, delay 0.5 / timeout 2.0, TIMEOUT in 2.0-3.0 s")
def test_polling_contract(broker):
    with BrokerClient(broker.address) as c:
        t0 = time.monotonic()
        (resp,) = c.query_task(0, 1, "idle", delay=0.5, timeout=2.0)
        elapsed = time.monotonic() - t0
    assert resp == WorkQueryResponse.status("TIMEOUT")
    assert 2.0 <= elapsed <= 3.0
