"""Persistent task store with the five EMEWS tables.

The store is a directory holding a SQLite database in WAL journal mode and a
``FORMAT`` marker file.  Tables:

* ``tasks``        one row per task (payload, result, status, timestamps, pool)
* ``output_queue`` tasks waiting to be executed, with a priority
* ``input_queue``  completed tasks whose results have not been collected
* ``experiments``  links tasks to an experiment id
* ``tags``         zero or more metadata tags per task

Every public mutation runs in a single ``BEGIN IMMEDIATE`` transaction while
holding the store lock, so operations are linearizable across threads.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import sqlite3
import threading
import time
from collections.abc import Iterable, Sequence
from contextlib import contextmanager
from pathlib import Path

logger = logging.getLogger(__name__)

FORMAT_NAME = "osprey-task-store"
FORMAT_VERSION = 1
DB_FILE = "tasks.db"
MARKER_FILE = "FORMAT"
DEFAULT_MAX_PAYLOAD = 1 << 20

_SCHEMA = """
CREATE TABLE IF NOT EXISTS tasks (
    task_id        INTEGER PRIMARY KEY AUTOINCREMENT,
    exp_id         TEXT NOT NULL,
    work_type      INTEGER NOT NULL,
    status         TEXT NOT NULL,
    payload        TEXT NOT NULL,
    result         TEXT,
    worker_pool_id TEXT,
    created_at     REAL NOT NULL,
    start_at       REAL,
    stop_at        REAL
);
CREATE TABLE IF NOT EXISTS output_queue (
    task_id   INTEGER PRIMARY KEY REFERENCES tasks(task_id),
    work_type INTEGER NOT NULL,
    priority  INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS output_queue_order
    ON output_queue (work_type, priority DESC, task_id ASC);
CREATE TABLE IF NOT EXISTS input_queue (
    task_id   INTEGER PRIMARY KEY REFERENCES tasks(task_id),
    work_type INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS experiments (
    exp_id  TEXT NOT NULL,
    task_id INTEGER NOT NULL UNIQUE REFERENCES tasks(task_id)
);
CREATE TABLE IF NOT EXISTS tags (
    task_id INTEGER NOT NULL REFERENCES tasks(task_id),
    tag     TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS tasks_pool_status ON tasks (worker_pool_id, status);
CREATE TABLE IF NOT EXISTS meta (
    key   TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
"""


class TaskStatus(str, enum.Enum):
    QUEUED = "Queued"
    RUNNING = "Running"
    COMPLETE = "Complete"
    CANCELED = "Canceled"


class StoreError(Exception):
    """Base class for task store errors."""

    code = "StoreError"


class PayloadTooLarge(StoreError):
    code = "PayloadTooLarge"


class StorageFailure(StoreError):
    code = "StorageFailure"


class UnknownTask(StoreError):
    code = "UnknownTask"


class InvalidTransition(StoreError):
    code = "InvalidTransition"


class StoreOpenFailure(StoreError):
    code = "StoreOpenFailure"


class TaskStore:
    """Atomic queue operations over the five task tables.

    Parameters
    ----------
    path : str or Path
        Store directory. Created if missing.
    max_payload : int
        Upper bound, in UTF-8 bytes, on task payloads and results.
    durable : bool
        If True every commit is fsync'd (``synchronous=FULL``). The default
        survives process crashes but not power loss.
    """

    def __init__(self, path, max_payload: int = DEFAULT_MAX_PAYLOAD, durable: bool = False):
        self.path = Path(path)
        self.max_payload = max_payload
        self._lock = threading.RLock()
        try:
            self.path.mkdir(parents=True, exist_ok=True)
            self._check_marker()
            self._conn = sqlite3.connect(
                self.path / DB_FILE, isolation_level=None, check_same_thread=False
            )
            self._conn.execute("PRAGMA journal_mode=WAL")
            self._conn.execute(f"PRAGMA synchronous={'FULL' if durable else 'NORMAL'}")
            self._conn.executescript(_SCHEMA)
            self._conn.execute(
                "INSERT OR IGNORE INTO meta VALUES ('format_version', ?)", (str(FORMAT_VERSION),)
            )
        except (OSError, sqlite3.Error) as e:
            raise StoreOpenFailure(f"cannot open task store at {self.path}: {e}") from e
        self._closed = False

    def _check_marker(self) -> None:
        marker = self.path / MARKER_FILE
        expected = f"{FORMAT_NAME} {FORMAT_VERSION}\n"
        if marker.exists():
            found = marker.read_text()
            if found != expected:
                raise StoreOpenFailure(f"unsupported store format {found.strip()!r} in {self.path}")
        elif (self.path / DB_FILE).exists():
            raise StoreOpenFailure(f"{self.path} has a database but no format marker")
        else:
            marker.write_text(expected)

    def close(self) -> None:
        with self._lock:
            if not self._closed:
                self._conn.close()
                self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @contextmanager
    def _tx(self):
        with self._lock:
            if self._closed:
                raise StorageFailure("store is closed")
            try:
                self._conn.execute("BEGIN IMMEDIATE")
            except sqlite3.Error as e:
                raise StorageFailure(str(e)) from e
            try:
                yield self._conn
            except BaseException:
                self._conn.execute("ROLLBACK")
                raise
            else:
                try:
                    self._conn.execute("COMMIT")
                except sqlite3.Error as e:
                    self._conn.execute("ROLLBACK")
                    raise StorageFailure(str(e)) from e

    def _check_size(self, what: str, text: str) -> None:
        size = len(text.encode("utf-8"))
        if size > self.max_payload:
            raise PayloadTooLarge(f"{what} is {size} bytes, limit is {self.max_payload}")

    # -- producer side ---------------------------------------------------

    def insert_task(
        self,
        exp_id: str,
        work_type: int,
        payload: str,
        priority: int = 0,
        tag: str | None = None,
    ) -> int:
        self._check_size("payload", payload)
        try:
            with self._tx() as c:
                cur = c.execute(
                    "INSERT INTO tasks (exp_id, work_type, status, payload, created_at) "
                    "VALUES (?, ?, ?, ?, ?)",
                    (exp_id, work_type, TaskStatus.QUEUED.value, payload, time.time()),
                )
                task_id = cur.lastrowid
                c.execute("INSERT INTO output_queue VALUES (?, ?, ?)", (task_id, work_type, priority))
                c.execute("INSERT INTO experiments VALUES (?, ?)", (exp_id, task_id))
                if tag is not None:
                    c.execute("INSERT INTO tags VALUES (?, ?)", (task_id, tag))
        except sqlite3.Error as e:
            raise StorageFailure(str(e)) from e
        return task_id

    def pop_result(self, task_id: int) -> str | None:
        """Remove ``task_id`` from the input queue and return its result."""
        try:
            with self._tx() as c:
                cur = c.execute("DELETE FROM input_queue WHERE task_id = ?", (task_id,))
                if cur.rowcount == 0:
                    return None
                (result,) = c.execute(
                    "SELECT result FROM tasks WHERE task_id = ?", (task_id,)
                ).fetchone()
        except sqlite3.Error as e:
            raise StorageFailure(str(e)) from e
        return result

    def update_priorities(self, updates: Iterable[tuple[int, int]]) -> int:
        return len(self.update_priorities_applied(updates))

    def update_priorities_applied(self, updates: Iterable[tuple[int, int]]) -> list[int]:
        """Like :meth:`update_priorities` but returns the ids actually updated."""
        applied = []
        try:
            with self._tx() as c:
                for task_id, priority in updates:
                    cur = c.execute(
                        "UPDATE output_queue SET priority = ? WHERE task_id = ?",
                        (int(priority), int(task_id)),
                    )
                    if cur.rowcount:
                        applied.append(int(task_id))
        except sqlite3.Error as e:
            raise StorageFailure(str(e)) from e
        return applied

    def cancel_tasks(self, task_ids: Iterable[int]) -> int:
        count = 0
        try:
            with self._tx() as c:
                for task_id in task_ids:
                    cur = c.execute("DELETE FROM output_queue WHERE task_id = ?", (int(task_id),))
                    if cur.rowcount:
                        c.execute(
                            "UPDATE tasks SET status = ? WHERE task_id = ?",
                            (TaskStatus.CANCELED.value, int(task_id)),
                        )
                        count += 1
        except sqlite3.Error as e:
            raise StorageFailure(str(e)) from e
        return count

    # -- consumer side ---------------------------------------------------

    def pop_tasks(
        self, work_type: int, n: int, worker_pool_id: str, include_priority: bool = False
    ) -> list[tuple]:
        """Pop up to ``n`` tasks of ``work_type`` in (priority desc, task_id asc) order.

        Returns ``(task_id, payload)`` pairs, or ``(task_id, payload, priority)``
        triples when ``include_priority`` is set.
        """
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        try:
            with self._tx() as c:
                rows = c.execute(
                    "SELECT q.task_id, t.payload, q.priority FROM output_queue q "
                    "JOIN tasks t ON t.task_id = q.task_id WHERE q.work_type = ? "
                    "ORDER BY q.priority DESC, q.task_id ASC LIMIT ?",
                    (work_type, n),
                ).fetchall()
                now = time.time()
                for task_id, _, _ in rows:
                    c.execute("DELETE FROM output_queue WHERE task_id = ?", (task_id,))
                    c.execute(
                        "UPDATE tasks SET status = ?, start_at = ?, worker_pool_id = ? "
                        "WHERE task_id = ?",
                        (TaskStatus.RUNNING.value, now, worker_pool_id, task_id),
                    )
        except sqlite3.Error as e:
            raise StorageFailure(str(e)) from e
        if include_priority:
            return [tuple(r) for r in rows]
        return [(tid, payload) for tid, payload, _ in rows]

    def push_result(
        self, task_id: int, work_type: int, result: str, worker_pool_id: str | None = None
    ) -> None:
        """Record ``result`` for a Running task and push it onto the input queue.

        If ``worker_pool_id`` is given the task must currently be owned by that
        pool; a stale owner (e.g. a pool whose tasks were requeued) is refused.
        """
        self._check_size("result", result)
        try:
            with self._tx() as c:
                row = c.execute(
                    "SELECT status, worker_pool_id FROM tasks WHERE task_id = ?", (task_id,)
                ).fetchone()
                if row is None:
                    raise UnknownTask(f"no task {task_id}")
                status, owner = row
                if status != TaskStatus.RUNNING.value:
                    raise InvalidTransition(f"task {task_id} is {status}, not Running")
                if worker_pool_id is not None and owner != worker_pool_id:
                    raise InvalidTransition(
                        f"task {task_id} is owned by {owner!r}, not {worker_pool_id!r}"
                    )
                c.execute(
                    "UPDATE tasks SET status = ?, result = ?, stop_at = ? WHERE task_id = ?",
                    (TaskStatus.COMPLETE.value, result, time.time(), task_id),
                )
                c.execute("INSERT INTO input_queue VALUES (?, ?)", (task_id, work_type))
        except sqlite3.Error as e:
            raise StorageFailure(str(e)) from e

    def requeue_pool(self, worker_pool_id: str) -> int:
        """Return every Running task owned by ``worker_pool_id`` to the output queue at priority 0."""
        try:
            with self._tx() as c:
                rows = c.execute(
                    "SELECT task_id, work_type FROM tasks WHERE worker_pool_id = ? AND status = ?",
                    (worker_pool_id, TaskStatus.RUNNING.value),
                ).fetchall()
                for task_id, work_type in rows:
                    c.execute(
                        "UPDATE tasks SET status = ?, start_at = NULL, worker_pool_id = NULL "
                        "WHERE task_id = ?",
                        (TaskStatus.QUEUED.value, task_id),
                    )
                    c.execute("INSERT INTO output_queue VALUES (?, ?, 0)", (task_id, work_type))
        except sqlite3.Error as e:
            raise StorageFailure(str(e)) from e
        logger.info("requeued %d tasks from pool %s", len(rows), worker_pool_id)
        return len(rows)

    # -- reads -----------------------------------------------------------

    def task_status(self, task_ids: Sequence[int]) -> list[tuple[int, TaskStatus | None]]:
        """Status of each id, in input order. Unknown ids map to None."""
        return [(tid, st) for tid, st, _ in self.task_status_detail(task_ids)]

    def task_status_detail(
        self, task_ids: Sequence[int]
    ) -> list[tuple[int, TaskStatus | None, float | None]]:
        """Like :meth:`task_status` with the task's ``stop_at`` as a third field."""
        ids = [int(t) for t in task_ids]
        found = {}
        with self._lock:
            try:
                # chunked to stay under SQLite's bound-parameter limit
                for i in range(0, len(ids), 500):
                    chunk = ids[i : i + 500]
                    marks = ",".join("?" * len(chunk))
                    for tid, status, stop_at in self._conn.execute(
                        f"SELECT task_id, status, stop_at FROM tasks WHERE task_id IN ({marks})",
                        chunk,
                    ):
                        found[tid] = (TaskStatus(status), stop_at)
            except sqlite3.Error as e:
                raise StorageFailure(str(e)) from e
        return [(tid, *found.get(tid, (None, None))) for tid in ids]

    def get_task(self, task_id: int) -> dict | None:
        with self._lock:
            cur = self._conn.execute("SELECT * FROM tasks WHERE task_id = ?", (task_id,))
            row = cur.fetchone()
            if row is None:
                return None
            rec = dict(zip([d[0] for d in cur.description], row))
            rec["status"] = TaskStatus(rec["status"])
            rec["tags"] = [
                t for (t,) in self._conn.execute("SELECT tag FROM tags WHERE task_id = ?", (task_id,))
            ]
            return rec

    def priority_of(self, task_id: int) -> int | None:
        with self._lock:
            row = self._conn.execute(
                "SELECT priority FROM output_queue WHERE task_id = ?", (task_id,)
            ).fetchone()
        return None if row is None else row[0]

    def output_queue(self) -> list[tuple[int, int, int]]:
        """(task_id, work_type, priority) rows in pop order."""
        with self._lock:
            return self._conn.execute(
                "SELECT task_id, work_type, priority FROM output_queue "
                "ORDER BY work_type, priority DESC, task_id"
            ).fetchall()

    def input_queue(self) -> list[tuple[int, int]]:
        with self._lock:
            return self._conn.execute(
                "SELECT task_id, work_type FROM input_queue ORDER BY task_id"
            ).fetchall()

    def status_counts(self) -> dict[TaskStatus, int]:
        with self._lock:
            rows = self._conn.execute("SELECT status, COUNT(*) FROM tasks GROUP BY status").fetchall()
        counts = {s: 0 for s in TaskStatus}
        counts.update({TaskStatus(s): n for s, n in rows})
        return counts

    def total_tasks(self) -> int:
        with self._lock:
            return self._conn.execute("SELECT COUNT(*) FROM tasks").fetchone()[0]

    def digest(self) -> str:
        """Hash of every table's contents; equal digests mean equal logical state."""
        h = hashlib.sha256()
        with self._lock:
            for table, order in [
                ("tasks", "task_id"),
                ("output_queue", "task_id"),
                ("input_queue", "task_id"),
                ("experiments", "task_id"),
                ("tags", "task_id, tag"),
            ]:
                h.update(table.encode())
                for row in self._conn.execute(f"SELECT * FROM {table} ORDER BY {order}"):
                    h.update(repr(row).encode())
        return h.hexdigest()

    def check_consistency(self) -> list[str]:
        """Problems with queue/table consistency; empty when the store is sound."""
        problems = []
        with self._lock:
            q = self._conn.execute
            bad_out = q(
                "SELECT o.task_id FROM output_queue o LEFT JOIN tasks t USING (task_id) "
                "WHERE t.status IS NOT ?", (TaskStatus.QUEUED.value,)
            ).fetchall()
            if bad_out:
                problems.append(f"output queue holds non-Queued tasks {[r[0] for r in bad_out]}")
            bad_in = q(
                "SELECT i.task_id FROM input_queue i LEFT JOIN tasks t USING (task_id) "
                "WHERE t.status IS NOT ?", (TaskStatus.COMPLETE.value,)
            ).fetchall()
            if bad_in:
                problems.append(f"input queue holds non-Complete tasks {[r[0] for r in bad_in]}")
            orphan = q(
                "SELECT task_id FROM tasks WHERE status = ? AND task_id NOT IN "
                "(SELECT task_id FROM output_queue)", (TaskStatus.QUEUED.value,)
            ).fetchall()
            if orphan:
                problems.append(f"Queued tasks missing from output queue {[r[0] for r in orphan]}")
            lifecycle = q(
                "SELECT task_id FROM tasks WHERE "
                "(start_at IS NOT NULL) != (status IN ('Running', 'Complete')) OR "
                "(stop_at IS NOT NULL) != (status = 'Complete') OR "
                "(result IS NOT NULL) != (status = 'Complete')"
            ).fetchall()
            if lifecycle:
                problems.append(f"timestamp/result fields inconsistent for {[r[0] for r in lifecycle]}")
        return problems

    def compact(self) -> None:
        """Checkpoint the write-ahead log into the main database and vacuum."""
        with self._lock:
            self._conn.execute("PRAGMA wal_checkpoint(TRUNCATE)")
            self._conn.execute("VACUUM")

    def info(self) -> dict:
        counts = self.status_counts()
        return {
            "path": str(self.path),
            "format": f"{FORMAT_NAME} {FORMAT_VERSION}",
            "tasks": self.total_tasks(),
            **{s.value.lower(): n for s, n in counts.items()},
            "output_queue": len(self.output_queue()),
            "input_queue": len(self.input_queue()),
            "digest": self.digest(),
        }
