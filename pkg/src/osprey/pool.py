"""Worker pools: acquire tasks of one work type, run them, report results.

A pool owns the tasks it has popped but not yet reported.  Its acquisition
thread asks the broker for ``batch_size - owned`` tasks whenever that deficit
is at least ``threshold``; popped tasks wait in a local queue until one of
``num_workers`` worker threads is free.  Results go back through a separate
reporter thread so a finished worker can start its next cached task at once.
"""

from __future__ import annotations

import argparse
import collections
import json
import logging
import signal
import sys
import threading
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path

from osprey.client import BrokerClient, ConnectionLost
from osprey.protocol import PollPolicy
from osprey.store import StoreError
from osprey.trace import Clock, pool_trace_writer

logger = logging.getLogger(__name__)

TaskHandler = Callable[[str], str]


@dataclass
class PoolConfig:
    pool_id: str
    work_type: int = 0
    num_workers: int = 1
    batch_size: int = 1
    threshold: int = 1
    broker_address: str = "127.0.0.1:5555"
    poll: PollPolicy = field(default_factory=PollPolicy)

    def __post_init__(self):
        if self.num_workers < 1:
            raise ValueError("num_workers must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 1 <= self.threshold <= self.batch_size:
            raise ValueError("threshold must be in [1, batch_size]")

    def to_dict(self) -> dict:
        return asdict(self)


def tasks_to_request(batch_size: int, owned: int, threshold: int) -> int:
    """How many tasks to ask for; 0 means the deficit is below threshold."""
    deficit = batch_size - owned
    return deficit if deficit >= threshold and deficit > 0 else 0


@dataclass(frozen=True)
class Decision:
    """One acquisition query: when, how many were owned, requested, received."""

    at_ms: int
    owned: int
    requested: int
    received: int


@dataclass(frozen=True)
class PoolReport:
    executed: int
    abandoned: int
    error: str | None = None


@dataclass
class _Task:
    task_id: int
    payload: str
    priority: int
    popped_at: int
    started_at: int = 0
    finished_at: int = 0
    result: str = ""


# -- handlers -----------------------------------------------------------------

_HANDLERS: dict[str, TaskHandler] = {}


def register_handler(name: str):
    def deco(fn: TaskHandler) -> TaskHandler:
        _HANDLERS[name] = fn
        return fn

    return deco


def get_handler(name: str) -> TaskHandler:
    if name not in _HANDLERS:
        # handlers living in other modules register themselves on import
        import osprey.ackley  # noqa: F401
    try:
        return _HANDLERS[name]
    except KeyError:
        raise KeyError(f"no task handler named {name!r}; known: {sorted(_HANDLERS)}") from None


@register_handler("echo")
def echo_handler(payload: str) -> str:
    return payload


@register_handler("sleep")
def sleep_handler(payload: str) -> str:
    """Sleeps ``payload["sleep"]`` seconds (0 if absent) and echoes the payload."""
    try:
        secs = float(json.loads(payload).get("sleep", 0.0))
    except (ValueError, AttributeError):
        secs = 0.0
    time.sleep(secs)
    return payload


# -- the pool -----------------------------------------------------------------


class WorkerPool:
    """A running pool; see :func:`run_pool`.

    ``credits``, if not None, caps the total number of tasks the pool may
    acquire until :meth:`grant` adds more. Used to step a pool in lockstep
    with a driver.
    """

    def __init__(
        self,
        config: PoolConfig,
        handler: TaskHandler,
        trace_path=None,
        credits: int | None = None,
    ):
        self.config = config
        self.handler = handler
        self.clock = Clock()
        self.trace = pool_trace_writer(trace_path, config.to_dict(), self.clock) if trace_path else None
        self.decisions: list[Decision] = []
        self.error: str | None = None
        self._credits = credits
        self._cv = threading.Condition()
        self._local: collections.deque[_Task] = collections.deque()
        self._owned = 0
        self._running = 0
        self._executed = 0
        self._stopping = False
        self._closing = False
        self._hard = False
        self._report_lock = threading.Lock()
        self._reports: collections.deque[_Task] = collections.deque()
        self._threads: list[threading.Thread] = []
        self._acquire_client: BrokerClient | None = None
        self._report_client: BrokerClient | None = None
        self._finished = threading.Event()
        self._report: PoolReport | None = None

    # public state, read under the lock
    @property
    def owned(self) -> int:
        with self._cv:
            return self._owned

    @property
    def running(self) -> int:
        with self._cv:
            return self._running

    @property
    def executed(self) -> int:
        with self._cv:
            return self._executed

    def start(self) -> "WorkerPool":
        cfg = self.config
        self._acquire_client = BrokerClient(cfg.broker_address, cfg.poll)
        self._report_client = BrokerClient(cfg.broker_address, cfg.poll)
        name = cfg.pool_id
        self._acquirer = threading.Thread(target=self._acquire_loop, name=f"{name}-acquire", daemon=True)
        self._reporter = threading.Thread(target=self._report_loop, name=f"{name}-report", daemon=True)
        self._workers = [
            threading.Thread(target=self._work_loop, name=f"{name}-worker-{i}", daemon=True)
            for i in range(cfg.num_workers)
        ]
        for t in [self._acquirer, self._reporter, *self._workers]:
            t.start()
        logger.info("pool %s started: %s", name, cfg)
        return self

    def grant(self, n: int) -> None:
        with self._cv:
            self._credits = (self._credits or 0) + n
            self._cv.notify_all()

    def _want(self) -> int:
        n = tasks_to_request(self.config.batch_size, self._owned, self.config.threshold)
        if self._credits is not None:
            n = min(n, self._credits)
        return n

    def _fail(self, msg: str) -> None:
        logger.error("pool %s: %s", self.config.pool_id, msg)
        with self._cv:
            if self.error is None:
                self.error = msg
            self._stopping = self._closing = self._hard = True
            self._cv.notify_all()

    def _acquire_loop(self):
        cfg = self.config
        while True:
            with self._cv:
                self._cv.wait_for(lambda: self._stopping or self._want() > 0)
                if self._stopping:
                    return
                n = self._want()
                owned = self._owned
            try:
                responses = self._acquire_client.query_task(
                    cfg.work_type, n, cfg.pool_id, cfg.poll.delay, cfg.poll.timeout
                )
            except (ConnectionLost, StoreError, OSError) as e:
                self._fail(f"task query failed: {e}")
                return
            now = self.clock.now_ms()
            work = [r for r in responses if r.is_work]
            with self._cv:
                self.decisions.append(Decision(now, owned, n, len(work)))
                for r in work:
                    self._local.append(_Task(r.task_id, r.payload, r.priority or 0, now))
                self._owned += len(work)
                if self._credits is not None:
                    self._credits -= len(work)
                self._cv.notify_all()

    def _work_loop(self):
        while True:
            with self._cv:
                self._cv.wait_for(lambda: self._local or self._closing)
                if self._hard or not self._local:
                    return
                task = self._local.popleft()
                self._running += 1
            task.started_at = self.clock.now_ms()
            try:
                task.result = self.handler(task.payload)
                if not isinstance(task.result, str):
                    task.result = json.dumps(task.result)
            except Exception as e:  # noqa: BLE001 - failures are reported as results
                logger.warning("task %d raised %r", task.task_id, e)
                task.result = json.dumps({"error": f"{type(e).__name__}: {e}"})
            task.finished_at = self.clock.now_ms()
            with self._cv:
                self._running -= 1
                self._reports.append(task)
                self._cv.notify_all()

    def _report_loop(self):
        cfg = self.config
        while True:
            with self._cv:
                self._cv.wait_for(lambda: self._reports or self._hard or (self._closing and self._owned == 0))
                if self._hard or not self._reports:
                    return
                task = self._reports.popleft()
            with self._report_lock:
                if self._hard:
                    return
                try:
                    self._report_client.report_task(task.task_id, cfg.work_type, task.result, cfg.pool_id)
                except StoreError as e:
                    # e.g. the task was requeued away from this pool meanwhile
                    logger.warning("report of task %d refused: %s", task.task_id, e)
                except (ConnectionLost, OSError) as e:
                    self._fail(f"result report failed: {e}")
                    return
                else:
                    if self.trace is not None:
                        self.trace.write([
                            task.task_id, cfg.pool_id, cfg.work_type, task.popped_at,
                            task.started_at, task.finished_at, task.priority,
                        ])
                with self._cv:
                    self._owned -= 1
                    self._executed += 1
                    self._cv.notify_all()

    def wait(self, timeout: float | None = None) -> bool:
        """Block until the pool has stopped on its own (e.g. lost its broker)."""
        with self._cv:
            return self._cv.wait_for(lambda: self.error is not None, timeout)

    def stop(self, drain: bool = True, timeout: float | None = None) -> PoolReport:
        """Stop acquiring. With ``drain`` finish owned tasks first; otherwise abandon them."""
        if self._report is not None:
            return self._report
        with self._cv:
            self._stopping = True
            self._cv.notify_all()
        # an in-flight query returns within the poll timeout
        self._acquirer.join(timeout)
        if drain:
            with self._cv:
                self._closing = True
                self._cv.notify_all()
            for t in self._workers:
                t.join(timeout)
            self._reporter.join(timeout)
        with self._report_lock:
            with self._cv:
                self._hard = self._closing = True
                self._cv.notify_all()
                report = PoolReport(self._executed, self._owned, self.error)
        for t in self._workers:
            t.join(0.05)
        for c in (self._acquire_client, self._report_client):
            if c is not None:
                c.close()
        if self.trace is not None:
            self.trace.close()
        self._report = report
        logger.info("pool %s stopped: %s", self.config.pool_id, report)
        return report


def run_pool(config: PoolConfig, handler: TaskHandler, trace_path=None, credits=None) -> WorkerPool:
    """Start a pool in background threads and return its handle."""
    return WorkerPool(config, handler, trace_path, credits).start()


def stop_pool(handle: WorkerPool, drain: bool = True) -> PoolReport:
    return handle.stop(drain=drain)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pool", description="Worker pool")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("run", help="run a pool until interrupted")
    p.add_argument("--id", required=True, dest="pool_id")
    p.add_argument("--broker", required=True, help="HOST:PORT")
    p.add_argument("--work-type", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=None, help="defaults to --workers")
    p.add_argument("--threshold", type=int, default=1)
    p.add_argument("--handler", required=True)
    p.add_argument("--trace", type=Path, default=None)
    p.add_argument("--delay", type=float, default=0.5, help="poll delay (s)")
    p.add_argument("--timeout", type=float, default=2.0, help="poll timeout (s)")
    p.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    cfg = PoolConfig(
        args.pool_id, args.work_type, args.workers, args.batch_size or args.workers, args.threshold,
        args.broker, PollPolicy(args.delay, args.timeout),
    )
    try:
        pool = run_pool(cfg, get_handler(args.handler), args.trace)
    except ConnectionLost as e:
        print(f"pool: {e}", file=sys.stderr)
        return 1
    print(f"pool {cfg.pool_id} running", flush=True)

    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    while not stop.wait(0.2):
        if pool.error is not None:
            break
    report = pool.stop(drain=pool.error is None)
    print(json.dumps({"executed": report.executed, "abandoned": report.abandoned, "error": report.error}), flush=True)
    return 1 if report.error else 0


if __name__ == "__main__":
    sys.exit(main())
