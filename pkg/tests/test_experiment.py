import json
import subprocess
import sys

import pytest

from osprey.ackley import AckleyParams, LognormalDelay
from osprey.experiment import (
    ExperimentPlan,
    SteppedLauncher,
    ThreadLauncher,
    parse_pool_schedule,
    run_experiment,
)
from osprey.pool import PoolConfig
from osprey.trace import read_reprio_trace, reprio_trajectories

from conftest import FAST

NO_DELAY = AckleyParams(delay=LognormalDelay(enabled=False))


def plan(n, every, workers=1, **kw):
    return ExperimentPlan(n, every, [(0, PoolConfig("p1", num_workers=workers, batch_size=workers, poll=FAST))], **kw)


def test_plan_validation():
    with pytest.raises(ValueError):
        ExperimentPlan(10, 20)
    with pytest.raises(ValueError):
        ExperimentPlan(10, 0)


def test_parse_pool_schedule():
    sched = parse_pool_schedule("0:33:33:1,2:8,4:8:16:4")
    assert [k for k, _ in sched] == [0, 2, 4]
    assert [(c.pool_id, c.num_workers, c.batch_size, c.threshold) for _, c in sched] == [
        ("pool-1", 33, 33, 1), ("pool-2", 8, 8, 1), ("pool-3", 8, 16, 4),
    ]
    with pytest.raises(ValueError):
        parse_pool_schedule("1")


def test_single_group_has_no_rounds(broker):
    rep = run_experiment(plan(20, 20, workers=2), NO_DELAY, broker.address, poll=FAST)
    assert len(rep.completions) == 20 and rep.reprio_log == []


def test_round_sizes_and_trajectory(broker, tmp_path):
    rep = run_experiment(plan(100, 20, workers=4), NO_DELAY, broker.address, trace_dir=tmp_path, poll=FAST)
    assert rep.round_sizes == [80, 60, 40, 20]
    assert len({t for t, _ in rep.completions}) == 100
    assert all(a >= b for a, b in zip(rep.best_trajectory, rep.best_trajectory[1:]))
    assert rep.best_after(100) == min(v for _, v in rep.completions)
    for r in rep.reprio_log:
        r.check_permutation()
    log = read_reprio_trace(tmp_path / "reprio.csv")
    assert [len(r.assignments) for r in log] == rep.round_sizes
    reprio_trajectories(log)
    saved = json.loads((tmp_path / "report.json").read_text())
    assert len(saved["completions"]) == 100
    assert (tmp_path / "pool-p1.csv").exists()


def test_static_baseline_never_reprioritizes(broker):
    rep = run_experiment(plan(40, 10, workers=2, reprioritize=False), NO_DELAY, broker.address, poll=FAST)
    assert rep.reprio_log == [] and len(rep.completions) == 40


def test_stepped_runs_are_deterministic(tmp_path):
    from osprey.broker import serve

    def once(i):
        server = serve("127.0.0.1:0", tmp_path / f"s{i}")
        try:
            rep = run_experiment(plan(60, 10, seed=5), NO_DELAY, server.address, SteppedLauncher(10), poll=FAST)
        finally:
            server.stop()
        return rep.completions, [r.assignments for r in rep.reprio_log], [r.skipped for r in rep.reprio_log]

    a, b = once(0), once(1)
    assert a == b
    assert a[2] == [0] * 5


def test_schedule_launches_pools_after_rounds(broker):
    sched = [(k, PoolConfig(f"p{k}", num_workers=2, batch_size=2, poll=FAST)) for k in (0, 1, 3)]
    rep = run_experiment(ExperimentPlan(50, 10, sched), NO_DELAY, broker.address, ThreadLauncher(), poll=FAST)
    assert [(p["pool_id"], p["after_round"]) for p in rep.pools] == [("p0", 0), ("p1", 1), ("p3", 3)]
    assert sum(r["executed"] for r in rep.pool_reports.values()) == 50


def test_cli_local_thread(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "osprey.experiment", "--broker", "local", "--launcher", "thread",
         "--samples", "30", "--retrain-every", "10", "--no-delay", "--pool-schedule", "0:2",
         "--poll-delay", "0.02", "--trace-dir", str(tmp_path / "run")],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0, proc.stderr
    summary = json.loads(proc.stdout.strip().splitlines()[-1])
    assert summary["evaluations"] == 30 and summary["rounds"] == [20, 10]
    assert (tmp_path / "run" / "completions.csv").exists()
