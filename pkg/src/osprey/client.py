"""Client session and futures API for model exploration algorithms.

A :class:`BrokerClient` is one connection to the broker.  Submitting a task
returns a :class:`TaskFuture`; the module-level :func:`as_completed`,
:func:`pop_completed` and :func:`update_priority` work on lists of futures
with one batched request per sweep.
"""

from __future__ import annotations

import itertools
import logging
import math
import socket
import threading
import time
from collections.abc import Iterator, Sequence
from dataclasses import dataclass

from osprey import protocol
from osprey.broker import parse_address
from osprey.protocol import PollPolicy, WorkQueryResponse
from osprey.store import TaskStatus

logger = logging.getLogger(__name__)


class ConnectionLost(ConnectionError):
    pass


class Timeout(TimeoutError):
    pass


class TaskCanceled(Exception):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SubmitSpec:
    exp_id: str
    work_type: int
    payload: str
    priority: int = 0
    tag: str | None = None


class BrokerClient:
    """A single broker session. Requests on one session are serialized."""

    def __init__(self, address: str, poll: PollPolicy = PollPolicy(), connect_timeout: float = 5.0):
        self.address = address
        self.poll = poll
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        try:
            self._sock = socket.create_connection(parse_address(address), timeout=connect_timeout)
        except OSError as e:
            raise ConnectionLost(f"cannot connect to broker at {address}: {e}") from e
        self._sock.settimeout(None)
        self._rfile = self._sock.makefile("rb")
        self._closed = False

    def close(self) -> None:
        with self._lock:
            if not self._closed:
                self._closed = True
                self._rfile.close()
                self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def call(self, op: str, **args):
        req_id = next(self._ids)
        with self._lock:
            if self._closed:
                raise ConnectionLost("session is closed")
            try:
                self._sock.sendall(protocol.encode(protocol.request(op, args, req_id)))
                line = self._rfile.readline()
            except OSError as e:
                raise ConnectionLost(f"broker connection failed: {e}") from e
        if not line:
            raise ConnectionLost("broker closed the connection")
        msg = protocol.decode(line)
        if msg.get("req_id") != req_id:
            raise protocol.ProtocolError(f"response for request {msg.get('req_id')}, expected {req_id}")
        return protocol.raise_for_error(msg)

    # -- the core task API -------------------------------------------------

    def submit_task(
        self, exp_id: str, work_type: int, payload: str, priority: int = 0, tag: str | None = None
    ) -> "TaskFuture":
        task_id = self.call(
            "submit", exp_id=exp_id, work_type=work_type, payload=payload, priority=priority, tag=tag
        )
        return TaskFuture(task_id, work_type, self)

    def submit(self, spec: SubmitSpec) -> "TaskFuture":
        return self.submit_task(spec.exp_id, spec.work_type, spec.payload, spec.priority, spec.tag)

    def query_task(
        self,
        work_type: int,
        n: int = 1,
        worker_pool: str = "default",
        delay: float | None = None,
        timeout: float | None = None,
    ) -> list[WorkQueryResponse]:
        policy = self._policy(delay, timeout)
        res = self.call(
            "query_task", work_type=work_type, n=n, worker_pool=worker_pool,
            delay=policy.delay, timeout=policy.timeout,
        )
        return [WorkQueryResponse.from_wire(d) for d in res]

    def report_task(self, task_id: int, work_type: int, result: str, worker_pool: str | None = None):
        self.call("report", task_id=task_id, work_type=work_type, result=result, worker_pool=worker_pool)

    def query_result(
        self, task_id: int, delay: float | None = None, timeout: float | None = None
    ) -> WorkQueryResponse:
        policy = self._policy(delay, timeout)
        res = self.call("query_result", task_id=task_id, delay=policy.delay, timeout=policy.timeout)
        return WorkQueryResponse.from_wire(res)

    def update_priorities(self, updates: Sequence[tuple[int, int]]) -> dict:
        return self.call("update_priorities", updates=[[int(t), int(p)] for t, p in updates])

    def cancel_tasks(self, task_ids: Sequence[int]) -> int:
        return self.call("cancel", task_ids=list(task_ids))

    def requeue_pool(self, worker_pool: str) -> int:
        return self.call("requeue", worker_pool=worker_pool)

    def status(self, task_ids: Sequence[int]) -> list[tuple[int, TaskStatus | None, float | None]]:
        rows = self.call("status", task_ids=list(task_ids))
        return [(tid, None if st is None else TaskStatus(st), stop) for tid, st, stop in rows]

    def ping(self) -> bool:
        return self.call("ping") == "pong"

    def _policy(self, delay, timeout) -> PollPolicy:
        delay = self.poll.delay if delay is None else delay
        timeout = self.poll.timeout if timeout is None else timeout
        delay = max(min(delay, timeout), 1e-3)
        return PollPolicy(delay, max(timeout, delay))


class TaskFuture:
    """Handle on one submitted task."""

    def __init__(self, task_id: int, work_type: int, client: BrokerClient):
        self.task_id = task_id
        self.work_type = work_type
        self.client = client
        self._result: str | None = None

    def __repr__(self):
        return f"TaskFuture(task_id={self.task_id}, work_type={self.work_type})"

    def status(self) -> TaskStatus:
        if self._result is not None:
            return TaskStatus.COMPLETE
        ((_, status, _),) = self.client.status([self.task_id])
        return status

    def done(self) -> bool:
        return self.status() in (TaskStatus.COMPLETE, TaskStatus.CANCELED)

    def result(self, timeout: float | None = None) -> str:
        """The task's result string.

        Blocks until the task completes, or at most ``timeout`` seconds if
        given (raising :class:`Timeout`). Raises :class:`TaskCanceled` if the
        task was canceled. Once obtained the result is cached locally.
        """
        if self._result is not None:
            return self._result
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            if deadline is None:
                wait = self.client.poll.timeout
            else:
                wait = max(deadline - time.monotonic(), 0.0)
            resp = self.client.query_result(self.task_id, timeout=wait)
            if resp.is_work:
                self._result = resp.payload
                return self._result
            if resp.payload == protocol.CANCELED:
                raise TaskCanceled(f"task {self.task_id} was canceled")
            if deadline is not None and time.monotonic() >= deadline:
                raise Timeout(f"task {self.task_id} did not complete within {timeout}s")

    def cancel(self) -> bool:
        return self.client.cancel_tasks([self.task_id]) == 1

    def set_priority(self, priority: int) -> bool:
        return self.client.update_priorities([(self.task_id, priority)])["count"] == 1


def _sweep(futures: Sequence[TaskFuture]) -> list[tuple[float, int, TaskFuture]]:
    """Finished futures as (stop_at, task_id, future), earliest first.

    Canceled tasks sort after completed ones.
    """
    by_client: dict[int, list[TaskFuture]] = {}
    for f in futures:
        by_client.setdefault(id(f.client), []).append(f)
    done = []
    for group in by_client.values():
        rows = group[0].client.status([f.task_id for f in group])
        for f, (_, status, stop_at) in zip(group, rows):
            if status is TaskStatus.COMPLETE:
                done.append((stop_at, f.task_id, f))
            elif status is TaskStatus.CANCELED:
                done.append((math.inf, f.task_id, f))
    done.sort(key=lambda t: (t[0], t[1]))
    return done


def _sweep_delay(futures, delay):
    if delay is not None:
        return delay
    return futures[0].client.poll.delay if futures else 0.5


def as_completed(
    futures: Sequence[TaskFuture],
    count: int | None = None,
    timeout: float | None = None,
    delay: float | None = None,
) -> Iterator[TaskFuture]:
    """Yield futures as their tasks finish, each at most once, stopping after ``count``.

    Canceled tasks count as finished. Raises :class:`Timeout` if ``timeout``
    seconds pass before ``count`` futures have been yielded.
    """
    count = len(futures) if count is None else count
    if count > len(futures):
        raise ValueError(f"count {count} exceeds the {len(futures)} futures given")
    if count <= 0:
        return
    delay = _sweep_delay(futures, delay)
    deadline = None if timeout is None else time.monotonic() + timeout
    pending = {id(f): f for f in futures}
    yielded = 0
    while True:
        for _, _, f in _sweep(list(pending.values())):
            del pending[id(f)]
            yield f
            yielded += 1
            if yielded == count:
                return
        if deadline is not None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise Timeout(f"{yielded} of {count} futures finished within {timeout}s")
            time.sleep(min(delay, remaining))
        else:
            time.sleep(delay)


def pop_completed(
    futures: list[TaskFuture], timeout: float | None = None, delay: float | None = None
) -> TaskFuture:
    """Remove and return the earliest finished future in ``futures``.

    Polls until one is found, or raises :class:`Timeout` after ``timeout``
    seconds, leaving the list unchanged.
    """
    if not futures:
        raise ValueError("pop_completed needs a non-empty list")
    delay = _sweep_delay(futures, delay)
    deadline = None if timeout is None else time.monotonic() + timeout
    while True:
        done = _sweep(futures)
        if done:
            f = done[0][2]
            futures.remove(f)
            return f
        if deadline is not None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise Timeout(f"no future finished within {timeout}s")
            time.sleep(min(delay, remaining))
        else:
            time.sleep(delay)


def update_priority(futures: Sequence[TaskFuture], priorities) -> int:
    """Set new priorities for ``futures`` in one batch; returns how many applied.

    ``priorities`` is a sequence matching ``futures`` or a single int for all.
    Tasks no longer queued are skipped.
    """
    if isinstance(priorities, int):
        priorities = [priorities] * len(futures)
    if len(priorities) != len(futures):
        raise LengthMismatch(f"{len(futures)} futures but {len(priorities)} priorities")
    if not futures:
        return 0
    by_client: dict[int, list] = {}
    for f, p in zip(futures, priorities):
        by_client.setdefault(id(f.client), [f.client, []])[1].append((f.task_id, p))
    return sum(client.update_priorities(updates)["count"] for client, updates in by_client.values())
