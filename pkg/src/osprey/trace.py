"""Task traces: recording, loading, and offline analysis.

A trace file is CSV preceded by one ``#``-prefixed JSON header line.  Pool
traces hold one row per executed task; reprioritization traces hold one row
per priority assignment.  Row timestamps are integer milliseconds on the
writer's monotonic clock, measured from the moment the header was written;
the header's ``wall_epoch`` lets files from different processes be aligned.
Loaded events use absolute epoch milliseconds.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import threading
import time
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

POOL_COLUMNS = ["task_id", "pool_id", "work_type", "popped_at", "started_at", "finished_at", "priority_at_pop"]
REPRIO_COLUMNS = ["round", "started_at", "finished_at", "task_id", "old_priority", "new_priority", "applied"]


class MalformedTrace(ValueError):
    pass


class InconsistentRounds(ValueError):
    pass


@dataclass(frozen=True)
class TraceEvent:
    task_id: int
    pool_id: str
    work_type: int
    popped_at: int
    started_at: int
    finished_at: int
    priority_at_pop: int

    def validate(self):
        if not self.popped_at <= self.started_at <= self.finished_at:
            raise MalformedTrace(
                f"task {self.task_id}: expected popped_at <= started_at <= finished_at, got "
                f"{self.popped_at}, {self.started_at}, {self.finished_at}"
            )


@dataclass
class ReprioEvent:
    round: int
    started_at: int
    finished_at: int
    assignments: list[tuple[int, int, int]]
    skipped_ids: list[int] = field(default_factory=list)

    @property
    def skipped(self) -> int:
        return len(self.skipped_ids)

    def check_permutation(self):
        got = sorted(new for _, _, new in self.assignments)
        if got != list(range(1, len(self.assignments) + 1)):
            raise InconsistentRounds(f"round {self.round}: priorities are not a permutation of 1..m")


class Clock:
    """Millisecond timestamps on the monotonic clock, relative to creation."""

    def __init__(self):
        self.wall_epoch = time.time()
        self._mono_epoch = time.monotonic()

    def now_ms(self) -> int:
        return int((time.monotonic() - self._mono_epoch) * 1000)

    def to_ms(self, mono: float) -> int:
        return int((mono - self._mono_epoch) * 1000)


class TraceWriter:
    """Append-only trace file writer; safe to share between threads."""

    def __init__(self, path, kind: str, columns: Sequence[str], header: dict | None = None, clock=None):
        self.clock = clock or Clock()
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._lock = threading.Lock()
        meta = {"kind": kind, "wall_epoch": self.clock.wall_epoch, "clock": "monotonic-ms", **(header or {})}
        self._fh.write("# " + json.dumps(meta) + "\n")
        self._csv = csv.writer(self._fh)
        self._csv.writerow(columns)
        self._fh.flush()

    def write(self, row: Sequence) -> None:
        with self._lock:
            self._csv.writerow(row)
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()


def pool_trace_writer(path, pool_config: dict, clock=None) -> TraceWriter:
    return TraceWriter(path, "pool", POOL_COLUMNS, {"pool": pool_config}, clock)


def reprio_trace_writer(path, clock=None) -> TraceWriter:
    return TraceWriter(path, "reprio", REPRIO_COLUMNS, clock=clock)


def write_reprio(writer: TraceWriter, ev: ReprioEvent) -> None:
    skipped = set(ev.skipped_ids)
    for tid, old, new in ev.assignments:
        writer.write([ev.round, ev.started_at, ev.finished_at, tid, old, new, int(tid not in skipped)])


def _read(path) -> tuple[dict, list[dict]]:
    text = Path(path).read_text()
    first, _, rest = text.partition("\n")
    if not first.startswith("#"):
        raise MalformedTrace(f"{path}: missing '#' header line")
    try:
        header = json.loads(first[1:])
    except json.JSONDecodeError as e:
        raise MalformedTrace(f"{path}: bad header: {e}") from e
    rows = list(csv.DictReader(io.StringIO(rest)))
    return header, rows


def _offset_ms(header: dict) -> int:
    return round(float(header["wall_epoch"]) * 1000)


def read_pool_trace(path) -> tuple[dict, list[TraceEvent]]:
    header, rows = _read(path)
    if header.get("kind") != "pool":
        raise MalformedTrace(f"{path}: not a pool trace")
    off = _offset_ms(header)
    events = []
    try:
        for r in rows:
            ev = TraceEvent(
                int(r["task_id"]), r["pool_id"], int(r["work_type"]),
                int(r["popped_at"]) + off, int(r["started_at"]) + off, int(r["finished_at"]) + off,
                int(r["priority_at_pop"]),
            )
            ev.validate()
            events.append(ev)
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, MalformedTrace):
            raise
        raise MalformedTrace(f"{path}: bad row: {e}") from e
    return header, events


def read_pool_traces(paths: Iterable) -> tuple[dict[str, dict], list[TraceEvent]]:
    """Load several pool traces; returns ({pool_id: pool config}, events)."""
    configs, events = {}, []
    for p in paths:
        header, evs = read_pool_trace(p)
        pool = header.get("pool", {})
        configs[pool.get("pool_id", str(p))] = pool
        events.extend(evs)
    return configs, events


def read_reprio_trace(path) -> list[ReprioEvent]:
    header, rows = _read(path)
    if header.get("kind") != "reprio":
        raise MalformedTrace(f"{path}: not a reprioritization trace")
    off = _offset_ms(header)
    rounds: dict[int, ReprioEvent] = {}
    try:
        for r in rows:
            k = int(r["round"])
            ev = rounds.get(k)
            if ev is None:
                ev = rounds[k] = ReprioEvent(k, int(r["started_at"]) + off, int(r["finished_at"]) + off, [])
            tid = int(r["task_id"])
            ev.assignments.append((tid, int(r["old_priority"]), int(r["new_priority"])))
            if not int(r["applied"]):
                ev.skipped_ids.append(tid)
    except (KeyError, ValueError) as e:
        raise MalformedTrace(f"{path}: bad row: {e}") from e
    return [rounds[k] for k in sorted(rounds)]


# -- analysis -----------------------------------------------------------------


@dataclass
class ConcurrencySeries:
    """Time-averaged running-task counts per bucket.

    ``per_pool[p][i]`` is the busy time of pool ``p``'s tasks inside bucket
    ``i`` divided by the bucket length.
    """

    start_ms: int
    bucket_ms: int
    per_pool: dict[str, np.ndarray]
    total: np.ndarray

    @property
    def times(self) -> np.ndarray:
        """Bucket start times in seconds since ``start_ms``."""
        return np.arange(len(self.total)) * self.bucket_ms / 1000.0


def _validate(events: Sequence[TraceEvent]) -> None:
    for ev in events:
        ev.validate()


def concurrency_series(
    events: Sequence[TraceEvent],
    bucket: float,
    start_ms: int | None = None,
    end_ms: int | None = None,
) -> ConcurrencySeries:
    """Per-pool concurrency over time in ``bucket``-second bins."""
    _validate(events)
    bucket_ms = max(1, round(bucket * 1000))
    if start_ms is None:
        start_ms = min((e.started_at for e in events), default=0)
    if end_ms is None:
        end_ms = max((e.finished_at for e in events), default=start_ms)
    n = max(0, -(-(end_ms - start_ms) // bucket_ms))
    span = n * bucket_ms
    per_pool = {}
    for pool in sorted({e.pool_id for e in events}):
        delta = np.zeros(span + 1, dtype=np.int64)
        for e in events:
            if e.pool_id != pool:
                continue
            a = min(max(e.started_at - start_ms, 0), span)
            b = min(max(e.finished_at - start_ms, 0), span)
            delta[a] += 1
            delta[b] -= 1
        running = np.cumsum(delta[:span])
        per_pool[pool] = running.reshape(n, bucket_ms).sum(axis=1) / bucket_ms if n else np.zeros(0)
    total = sum(per_pool.values()) if per_pool else np.zeros(n)
    return ConcurrencySeries(start_ms, bucket_ms, per_pool, np.asarray(total, dtype=float))


def busy_ms(events: Sequence[TraceEvent], start_ms: int, end_ms: int) -> int:
    return sum(max(0, min(e.finished_at, end_ms) - max(e.started_at, start_ms)) for e in events)


def utilization(
    events: Sequence[TraceEvent], num_workers: int, window: tuple[int, int] | None = None
) -> float:
    """Busy time over ``num_workers`` times the window length (ms bounds)."""
    _validate(events)
    if not events:
        return 0.0
    if window is None:
        window = (min(e.started_at for e in events), max(e.finished_at for e in events))
    start, end = window
    if end <= start:
        return 0.0
    u = busy_ms(events, start, end) / (num_workers * (end - start))
    if u > 1.0 + 1e-12:
        raise MalformedTrace(f"busy time exceeds {num_workers} workers over the window")
    return u


def reprio_trajectories(reprios: Sequence[ReprioEvent]) -> dict[int, list[tuple[int, int | None]]]:
    """Priority path of each task: ``[(round, new_priority), ...]``.

    A task absent from a round after having appeared earlier gets one
    ``(round, None)`` entry marking it consumed.
    """
    paths: dict[int, list] = {}
    consumed: set[int] = set()
    for ev in sorted(reprios, key=lambda r: r.round):
        ev.check_permutation()
        present = set()
        for tid, _, new in ev.assignments:
            if tid in consumed:
                raise InconsistentRounds(f"task {tid} reappears in round {ev.round} after being consumed")
            present.add(tid)
            paths.setdefault(tid, []).append((ev.round, new))
        for tid, path in paths.items():
            if tid not in present and tid not in consumed:
                path.append((ev.round, None))
                consumed.add(tid)
    return paths


def check_series_within_workers(series: ConcurrencySeries, configs: dict[str, dict]) -> list[str]:
    problems = []
    for pool, values in series.per_pool.items():
        cap = configs.get(pool, {}).get("num_workers")
        if cap is not None and len(values) and values.max() > cap + 1e-9:
            problems.append(f"pool {pool}: concurrency {values.max()} exceeds {cap} workers")
    return problems


def check_reprio_against_trace(reprios: Sequence[ReprioEvent], events: Sequence[TraceEvent]) -> list[str]:
    """Applied assignments must target tasks not yet popped when the round began."""
    popped = {e.task_id: e.popped_at for e in events}
    problems = []
    for ev in reprios:
        skipped = set(ev.skipped_ids)
        for tid, _, _ in ev.assignments:
            if tid not in skipped and tid in popped and popped[tid] < ev.started_at:
                problems.append(f"round {ev.round}: task {tid} popped before the round started")
    return problems


# -- CLI -----------------------------------------------------------------------


def parse_duration(text: str) -> float:
    text = text.strip()
    if text.endswith("ms"):
        return float(text[:-2]) / 1000
    if text.endswith("s"):
        return float(text[:-1])
    return float(text)


def _cmd_concurrency(args, out):
    configs, events = read_pool_traces(args.files)
    series = concurrency_series(events, parse_duration(args.bucket))
    pools = sorted(series.per_pool)
    w = csv.writer(out)
    w.writerow(["time", *pools, "total"])
    for i, t in enumerate(series.times):
        w.writerow([f"{t:.3f}", *(f"{series.per_pool[p][i]:.4f}" for p in pools), f"{series.total[i]:.4f}"])
    for problem in check_series_within_workers(series, configs):
        print(f"warning: {problem}", file=sys.stderr)


def _cmd_utilization(args, out):
    configs, events = read_pool_traces(args.files)
    w = csv.writer(out)
    w.writerow(["pool_id", "workers", "busy_s", "window_s", "utilization"])
    if not events:
        return
    window = (min(e.started_at for e in events), max(e.finished_at for e in events))
    length = (window[1] - window[0]) / 1000
    pools = sorted({e.pool_id for e in events})
    for pool in pools:
        evs = [e for e in events if e.pool_id == pool]
        workers = args.workers or configs.get(pool, {}).get("num_workers", 1)
        w.writerow([pool, workers, f"{busy_ms(evs, *window) / 1000:.3f}", f"{length:.3f}",
                    f"{utilization(evs, workers, window):.4f}"])
    if len(pools) > 1:
        workers = sum(args.workers or configs.get(p, {}).get("num_workers", 1) for p in pools)
        w.writerow(["all", workers, f"{busy_ms(events, *window) / 1000:.3f}", f"{length:.3f}",
                    f"{utilization(events, workers, window):.4f}"])


def _cmd_reprio(args, out):
    paths = reprio_trajectories(read_reprio_trace(args.file))
    w = csv.writer(out)
    w.writerow(["task_id", "round", "priority"])
    for tid in sorted(paths):
        for rnd, prio in paths[tid]:
            w.writerow([tid, rnd, "consumed" if prio is None else prio])


def _cmd_store(args, out):
    from osprey.store import TaskStore

    with TaskStore(args.dir) as st:
        if args.cmd == "compact-store":
            st.compact()
        info = st.info()
        info["problems"] = st.check_consistency()
    json.dump(info, out, indent=2)
    out.write("\n")


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = argparse.ArgumentParser(prog="trace", description="Analyze task and reprioritization traces")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("concurrency", help="running tasks per time bucket, per pool")
    p.add_argument("--bucket", default="0.5s")
    p.add_argument("files", nargs="+")
    p.set_defaults(fn=_cmd_concurrency)
    p = sub.add_parser("utilization", help="busy fraction of the workers over the trace span")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("files", nargs="+")
    p.set_defaults(fn=_cmd_utilization)
    p = sub.add_parser("reprio", help="per-task priority trajectories")
    p.add_argument("file")
    p.set_defaults(fn=_cmd_reprio)
    for name in ("inspect-store", "compact-store"):
        p = sub.add_parser(name, help=f"{name.split('-')[0]} a task store directory")
        p.add_argument("dir")
        p.set_defaults(fn=_cmd_store)
    args = parser.parse_args(argv)
    try:
        args.fn(args, out)
    except (MalformedTrace, InconsistentRounds) as e:
        print(f"trace: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
