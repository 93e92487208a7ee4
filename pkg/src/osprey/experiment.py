"""Asynchronous surrogate-guided Ackley minimization.

The driver submits every sample up front, waits for results in groups, and
after each group refits the GPR on everything completed so far and reorders
the still-pending tasks so the most promising run first.  Worker pools are
launched on a schedule keyed by the number of reprioritization rounds done.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import subprocess
import sys
import tempfile
import time
from concurrent.futures import Executor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from osprey.ackley import AckleyParams, LognormalDelay, ackley_handler, make_payload, sample_points
from osprey.client import BrokerClient, ConnectionLost, as_completed
from osprey.gpr import LENGTHSCALE_GRID, rank_pending
from osprey.pool import PoolConfig, PoolReport, WorkerPool
from osprey.protocol import PollPolicy
from osprey.trace import Clock, ReprioEvent, reprio_trace_writer, write_reprio

logger = logging.getLogger(__name__)


@dataclass
class ExperimentPlan:
    n_samples: int = 750
    retrain_every: int = 50
    # (after_reprioritization_k, pool); k = 0 launches at the start
    pool_schedule: list[tuple[int, PoolConfig]] = field(default_factory=list)
    seed: int = 0
    reprioritize: bool = True
    exp_id: str = "ackley"
    work_type: int = 0
    grid: tuple[float, ...] = LENGTHSCALE_GRID

    def __post_init__(self):
        if self.retrain_every < 1:
            raise ValueError("retrain_every must be >= 1")
        if self.n_samples < self.retrain_every:
            raise ValueError("n_samples must be >= retrain_every")


@dataclass
class ExperimentReport:
    completions: list[tuple[int, float]]
    best_trajectory: list[float]
    reprio_log: list[ReprioEvent]
    pools: list[dict]
    pool_reports: dict[str, dict]
    elapsed_s: float

    def best_after(self, n_evals: int) -> float:
        return self.best_trajectory[n_evals - 1]

    @property
    def round_sizes(self) -> list[int]:
        return [len(r.assignments) for r in self.reprio_log]

    def to_json(self) -> dict:
        return {
            "completions": [{"task_id": t, "value": v} for t, v in self.completions],
            "best_trajectory": self.best_trajectory,
            "reprioritizations": [
                {
                    "round": r.round, "started_at_ms": r.started_at, "finished_at_ms": r.finished_at,
                    "size": len(r.assignments), "skipped": r.skipped,
                }
                for r in self.reprio_log
            ],
            "pools": self.pools,
            "pool_reports": self.pool_reports,
            "elapsed_s": self.elapsed_s,
        }


# -- pool launchers -----------------------------------------------------------


class PoolLauncher:
    """Starts and stops worker pools for the driver."""

    def launch(self, config: PoolConfig) -> None:
        raise NotImplementedError

    def group_processed(self, group_size: int) -> None:
        """Called after each result group has been handled (and reprioritized)."""

    def stop_all(self, drain: bool = True) -> dict[str, PoolReport]:
        raise NotImplementedError


class ThreadLauncher(PoolLauncher):
    """Runs pools as thread groups inside the driver process."""

    def __init__(self, handler=ackley_handler, trace_dir=None):
        self.handler = handler
        self.trace_dir = Path(trace_dir) if trace_dir else None
        self.pools: dict[str, WorkerPool] = {}

    def _trace_path(self, config):
        return self.trace_dir / f"pool-{config.pool_id}.csv" if self.trace_dir else None

    def _make(self, config: PoolConfig) -> WorkerPool:
        return WorkerPool(config, self.handler, self._trace_path(config))

    def launch(self, config: PoolConfig) -> None:
        self.pools[config.pool_id] = self._make(config).start()

    def stop_all(self, drain: bool = True) -> dict[str, PoolReport]:
        return {pid: p.stop(drain=drain) for pid, p in self.pools.items()}


class SteppedLauncher(ThreadLauncher):
    """In-process pools that may only acquire ``step`` tasks per result group.

    With one single-worker pool this makes a run fully deterministic: the
    pool never pops a task while the driver is still reprioritizing.
    """

    def __init__(self, step: int, handler=ackley_handler, trace_dir=None):
        super().__init__(handler, trace_dir)
        self.step = step

    def _make(self, config):
        return WorkerPool(config, self.handler, self._trace_path(config), credits=self.step)

    def group_processed(self, group_size: int) -> None:
        for p in self.pools.values():
            p.grant(self.step)


class SubprocessLauncher(PoolLauncher):
    """Runs each pool as a ``pool run`` child process."""

    def __init__(self, handler: str = "ackley", trace_dir=None):
        self.handler = handler
        self.trace_dir = Path(trace_dir) if trace_dir else None
        self.procs: dict[str, subprocess.Popen] = {}

    def launch(self, config: PoolConfig) -> None:
        cmd = [
            sys.executable, "-m", "osprey.pool", "run", "--id", config.pool_id,
            "--broker", config.broker_address, "--work-type", str(config.work_type),
            "--workers", str(config.num_workers), "--batch-size", str(config.batch_size),
            "--threshold", str(config.threshold), "--handler", self.handler,
            "--delay", str(config.poll.delay), "--timeout", str(config.poll.timeout),
        ]
        if self.trace_dir:
            cmd += ["--trace", str(self.trace_dir / f"pool-{config.pool_id}.csv")]
        self.procs[config.pool_id] = subprocess.Popen(cmd, stdout=subprocess.PIPE, text=True)

    def stop_all(self, drain: bool = True) -> dict[str, PoolReport]:
        reports = {}
        for pid, proc in self.procs.items():
            proc.send_signal(signal.SIGTERM if drain else signal.SIGKILL)
            out, _ = proc.communicate()
            lines = [ln for ln in out.splitlines() if ln.startswith("{")]
            if lines:
                d = json.loads(lines[-1])
                reports[pid] = PoolReport(d["executed"], d["abandoned"], d.get("error"))
            else:
                reports[pid] = PoolReport(0, 0, f"exit code {proc.returncode}")
        return reports


# -- the driver -----------------------------------------------------------------


class _Inline(Executor):
    def submit(self, fn, *args, **kwargs):
        from concurrent.futures import Future

        f = Future()
        try:
            f.set_result(fn(*args, **kwargs))
        except BaseException as e:  # noqa: BLE001 - delivered through the future
            f.set_exception(e)
        return f


def _value(result: str) -> float:
    try:
        return float(json.loads(result)["value"])
    except (KeyError, TypeError, ValueError):
        return float("nan")


def run_experiment(
    plan: ExperimentPlan,
    params: AckleyParams,
    broker: str,
    launcher: PoolLauncher | None = None,
    retrain_executor: Executor | None = None,
    trace_dir=None,
    poll: PollPolicy = PollPolicy(),
) -> ExperimentReport:
    """Run the workflow against the broker at ``broker`` and return its report.

    ``retrain_executor`` runs the GPR fit and ranking; it may be any
    :class:`concurrent.futures.Executor` (a process pool, a remote executor).
    By default it runs inline in the driver.
    """
    launcher = launcher or ThreadLauncher(trace_dir=trace_dir)
    executor = retrain_executor or _Inline()
    clock = Clock()
    t_start = time.monotonic()
    reprio_writer = reprio_trace_writer(Path(trace_dir) / "reprio.csv", clock) if trace_dir else None
    bounds = (-params.bound, params.bound)

    client = BrokerClient(broker, poll)
    launched: list[dict] = []
    try:
        rng = np.random.default_rng(plan.seed)
        X = sample_points(plan.n_samples, params, rng)
        futures = [
            client.submit_task(plan.exp_id, plan.work_type, make_payload(x, params), priority=0)
            for x in X
        ]
        point = {f.task_id: X[i] for i, f in enumerate(futures)}
        priority = {f.task_id: 0 for f in futures}

        def launch_due(k):
            for after, cfg in plan.pool_schedule:
                if after == k:
                    cfg = replace(cfg, broker_address=broker)
                    launcher.launch(cfg)
                    launched.append({"pool_id": cfg.pool_id, "after_round": k, "at_ms": clock.now_ms()})

        launch_due(0)
        remaining = {f.task_id: f for f in futures}
        completions: list[tuple[int, float]] = []
        reprio_log: list[ReprioEvent] = []
        rounds = 0
        while remaining:
            group = min(plan.retrain_every, len(remaining))
            for f in as_completed(list(remaining.values()), count=group):
                del remaining[f.task_id]
                completions.append((f.task_id, _value(f.result())))
            if remaining and plan.reprioritize:
                rounds += 1
                started = clock.now_ms()
                pending_ids = sorted(remaining)
                done_ids = [t for t, _ in completions]
                ranking = executor.submit(
                    rank_pending,
                    np.array([point[t] for t in done_ids]),
                    np.array([v for _, v in completions]),
                    pending_ids,
                    np.array([point[t] for t in pending_ids]),
                    plan.grid,
                    bounds,
                ).result()
                res = client.update_priorities(ranking)
                ev = ReprioEvent(
                    rounds, started, clock.now_ms(),
                    [(t, priority[t], p) for t, p in ranking], list(res["skipped"]),
                )
                for t, p in ranking:
                    priority[t] = p
                reprio_log.append(ev)
                if reprio_writer is not None:
                    write_reprio(reprio_writer, ev)
                logger.info("round %d: %d reprioritized, %d skipped", rounds, len(ranking), ev.skipped)
                launch_due(rounds)
            launcher.group_processed(group)
    except ConnectionLost:
        logger.error("lost the broker; stopping pools, their tasks stay requeue-able")
        launcher.stop_all(drain=False)
        raise
    finally:
        client.close()
        if reprio_writer is not None:
            reprio_writer.close()

    reports = launcher.stop_all(drain=True)
    best, trajectory = float("inf"), []
    for _, v in completions:
        if v < best:
            best = v
        trajectory.append(best)
    report = ExperimentReport(
        completions, trajectory, reprio_log, launched,
        {k: asdict(v) for k, v in reports.items()}, time.monotonic() - t_start,
    )
    if trace_dir:
        _write_outputs(Path(trace_dir), report)
    return report


def _write_outputs(trace_dir: Path, report: ExperimentReport) -> None:
    trace_dir.mkdir(parents=True, exist_ok=True)
    (trace_dir / "report.json").write_text(json.dumps(report.to_json(), indent=2))
    with open(trace_dir / "completions.csv", "w") as fh:
        fh.write("index,task_id,value,best\n")
        for i, ((tid, v), b) in enumerate(zip(report.completions, report.best_trajectory)):
            fh.write(f"{i},{tid},{v!r},{b!r}\n")


def parse_pool_schedule(spec: str, prefix: str = "pool") -> list[tuple[int, PoolConfig]]:
    """Parse ``AFTER:WORKERS[:BATCH[:THRESHOLD]]`` items separated by commas.

    ``"0:8,2:8,4:8"`` starts an 8-worker pool at once and one more after
    reprioritization rounds 2 and 4.
    """
    out = []
    for i, item in enumerate(s for s in spec.split(",") if s.strip()):
        parts = [int(p) for p in item.split(":")]
        if not 2 <= len(parts) <= 4:
            raise ValueError(f"bad pool schedule item {item!r}")
        after, workers = parts[0], parts[1]
        batch = parts[2] if len(parts) > 2 else workers
        threshold = parts[3] if len(parts) > 3 else 1
        out.append((after, PoolConfig(f"{prefix}-{i + 1}", 0, workers, batch, threshold)))
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="osprey-ackley", description="GPR-reprioritized Ackley workflow")
    parser.add_argument("--broker", required=True, help="HOST:PORT, or 'local' to start one in-process")
    parser.add_argument("--samples", type=int, default=750)
    parser.add_argument("--dim", type=int, default=4)
    parser.add_argument("--retrain-every", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--pool-schedule", default="0:33:33:1,2:33:33:1,4:33:33:1",
                        help="AFTER:WORKERS[:BATCH[:THRESHOLD]],...")
    parser.add_argument("--trace-dir", type=Path, required=True)
    parser.add_argument("--no-delay", action="store_true", help="disable the lognormal task sleep")
    parser.add_argument("--delay-median", type=float, default=0.5)
    parser.add_argument("--delay-sigma", type=float, default=0.5)
    parser.add_argument("--static", action="store_true", help="never reprioritize (baseline)")
    parser.add_argument("--launcher", choices=["thread", "subprocess"], default="subprocess")
    parser.add_argument("--poll-delay", type=float, default=0.5)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )

    params = AckleyParams(
        dim=args.dim,
        delay=LognormalDelay(np.log(args.delay_median), args.delay_sigma, enabled=not args.no_delay),
    )
    poll = PollPolicy(args.poll_delay, max(2.0, args.poll_delay))
    schedule = [(k, replace(c, poll=poll)) for k, c in parse_pool_schedule(args.pool_schedule)]
    plan = ExperimentPlan(args.samples, args.retrain_every, schedule, args.seed, not args.static)
    launcher = (
        SubprocessLauncher("ackley", args.trace_dir)
        if args.launcher == "subprocess"
        else ThreadLauncher(trace_dir=args.trace_dir)
    )

    server = None
    broker = args.broker
    if broker == "local":
        from osprey.broker import serve

        server = serve("127.0.0.1:0", tempfile.mkdtemp(prefix="osprey-store-"))
        broker = server.address
    try:
        report = run_experiment(plan, params, broker, launcher, trace_dir=args.trace_dir, poll=poll)
    except ConnectionLost as e:
        print(f"osprey-ackley: {e}", file=sys.stderr)
        return 1
    finally:
        if server is not None:
            server.stop()
    summary = {
        "evaluations": len(report.completions),
        "best": report.best_trajectory[-1] if report.best_trajectory else None,
        "rounds": report.round_sizes,
        "pools": [p["pool_id"] for p in report.pools],
        "elapsed_s": round(report.elapsed_s, 3),
        "report": os.fspath(args.trace_dir / "report.json"),
    }
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
