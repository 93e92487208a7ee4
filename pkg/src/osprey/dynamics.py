"""Concurrency dynamics of a single pool draining a fixed queue of Ackley tasks.

Used to show how batch size and threshold shape the running-task count: a
refill only happens once the deficit reaches the threshold, so with
``batch_size == num_workers`` the count saws down to ``W - T + 1`` before the
next query tops it up, while oversubscription hides the refill latency.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from osprey.ackley import AckleyParams, make_payload, sample_points
from osprey.broker import serve
from osprey.client import BrokerClient
from osprey.pool import PoolConfig, get_handler, run_pool
from osprey.protocol import PollPolicy
from osprey.trace import TraceEvent, concurrency_series, read_pool_trace


@dataclass(frozen=True)
class SawtoothStats:
    buckets: int
    full_fraction: float  # buckets at exactly num_workers
    below_fraction: float  # buckets under num_workers
    min_value: float
    dips: int  # maximal runs of buckets at or under the dip level
    dip_level: int


def run_fixed_queue(
    num_tasks: int,
    num_workers: int,
    batch_size: int,
    threshold: int,
    params: AckleyParams | None = None,
    poll: PollPolicy = PollPolicy(0.05, 0.5),
    seed: int = 0,
    workdir=None,
) -> list[TraceEvent]:
    """Queue ``num_tasks`` Ackley tasks, drain them with one pool, return its trace."""
    params = params or AckleyParams()
    workdir = Path(workdir or tempfile.mkdtemp(prefix="osprey-dyn-"))
    server = serve("127.0.0.1:0", workdir / "store")
    trace = workdir / f"pool-b{batch_size}-t{threshold}.csv"
    try:
        with BrokerClient(server.address, poll) as c:
            for x in sample_points(num_tasks, params, np.random.default_rng(seed)):
                c.submit_task("dynamics", 0, make_payload(x, params))
        cfg = PoolConfig("p", 0, num_workers, batch_size, threshold, server.address, poll)
        pool = run_pool(cfg, get_handler("ackley"), trace)
        while pool.executed < num_tasks and pool.error is None:
            time.sleep(0.05)
        pool.stop()
    finally:
        server.stop()
    return read_pool_trace(trace)[1]


def sawtooth_stats(events: list[TraceEvent], num_workers: int, threshold: int, bucket: float) -> SawtoothStats:
    """Concurrency statistics over the steady state.

    The steady state runs from the moment the ``num_workers``-th task started
    to the last task start; the drain tail after that is excluded.
    """
    starts = sorted(e.started_at for e in events)
    lo, hi = starts[num_workers - 1], starts[-1]
    bucket_ms = max(1, round(bucket * 1000))
    hi = lo + (hi - lo) // bucket_ms * bucket_ms
    v = concurrency_series(events, bucket, start_ms=lo, end_ms=hi).total
    eps = 1e-9
    level = num_workers - threshold + 1
    low = v <= level + eps
    dips = int(low[0]) + int(np.sum(low[1:] & ~low[:-1])) if len(v) else 0
    return SawtoothStats(
        len(v),
        float(np.mean(v >= num_workers - eps)) if len(v) else 0.0,
        float(np.mean(v < num_workers - eps)) if len(v) else 0.0,
        float(v.min()) if len(v) else 0.0,
        dips,
        level,
    )
