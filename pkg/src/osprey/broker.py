"""The broker service: task store operations over a line-oriented TCP protocol.

Polling for work and for results happens server side.  A client sends its
delay/timeout once and the connection's handler thread retries the store
operation until it succeeds or the timeout passes.
"""

from __future__ import annotations

import argparse
import logging
import signal
import socket
import socketserver
import sys
import threading
import time
from contextlib import contextmanager
from pathlib import Path

from osprey import protocol
from osprey.protocol import PollPolicy, WorkQueryResponse
from osprey.store import DEFAULT_MAX_PAYLOAD, StoreError, StoreOpenFailure, TaskStatus, TaskStore

logger = logging.getLogger(__name__)

SHUTDOWN = "SHUTDOWN"


class BindFailure(OSError):
    pass


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep:
        raise ValueError(f"expected HOST:PORT, got {address!r}")
    return host or "127.0.0.1", int(port)


class Broker:
    """Request handlers, independent of the transport."""

    def __init__(self, store: TaskStore):
        self.store = store
        self.stopping = threading.Event()

    def _poll(self, attempt, policy: PollPolicy):
        deadline = time.monotonic() + policy.timeout
        while True:
            got = attempt()
            if got:
                return got
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            if self.stopping.wait(min(policy.delay, remaining)):
                return None

    def handle_submit(self, exp_id, work_type, payload, priority=0, tag=None) -> int:
        return self.store.insert_task(exp_id, int(work_type), payload, int(priority), tag)

    def handle_query_task(
        self, work_type: int, n: int = 1, worker_pool: str = "default", policy=PollPolicy()
    ) -> list[WorkQueryResponse]:
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        got = self._poll(
            lambda: self.store.pop_tasks(work_type, n, worker_pool, include_priority=True), policy
        )
        if not got:
            return [WorkQueryResponse.status(SHUTDOWN if self.stopping.is_set() else protocol.TIMEOUT)]
        return [WorkQueryResponse.work(tid, payload, prio) for tid, payload, prio in got]

    def handle_report(self, task_id, work_type, result, worker_pool=None) -> None:
        self.store.push_result(int(task_id), int(work_type), result, worker_pool)

    def handle_query_result(self, task_id: int, policy=PollPolicy()) -> WorkQueryResponse:
        def attempt():
            result = self.store.pop_result(task_id)
            if result is not None:
                return WorkQueryResponse.work(task_id, result)
            rec = self.store.get_task(task_id)
            if rec is None:
                return None
            if rec["status"] is TaskStatus.CANCELED:
                return WorkQueryResponse.status(protocol.CANCELED)
            if rec["status"] is TaskStatus.COMPLETE:
                # result already taken off the input queue by an earlier query
                return WorkQueryResponse.work(task_id, rec["result"])
            return None

        got = self._poll(attempt, policy)
        if got is None:
            return WorkQueryResponse.status(SHUTDOWN if self.stopping.is_set() else protocol.TIMEOUT)
        return got

    def handle_update_priorities(self, updates) -> dict:
        updates = [(int(t), int(p)) for t, p in updates]
        applied = set(self.store.update_priorities_applied(updates))
        return {"count": len(applied), "skipped": [t for t, _ in updates if t not in applied]}

    def handle_cancel(self, task_ids) -> int:
        return self.store.cancel_tasks(task_ids)

    def handle_requeue(self, worker_pool) -> int:
        return self.store.requeue_pool(worker_pool)

    def handle_status(self, task_ids) -> list:
        return [
            [tid, None if st is None else st.value, stop]
            for tid, st, stop in self.store.task_status_detail(task_ids)
        ]

    def dispatch(self, msg: dict) -> dict:
        req_id = msg.get("req_id")
        op = msg.get("op")
        args = msg.get("args") or {}
        try:
            if not isinstance(args, dict):
                raise TypeError("args must be an object")
            result = self._call(op, args)
        except StoreError as e:
            return protocol.error(req_id, e.code, str(e))
        except (TypeError, ValueError, KeyError) as e:
            return protocol.error(req_id, "BadRequest", f"{type(e).__name__}: {e}")
        except Exception as e:  # noqa: BLE001 - the connection must survive handler bugs
            logger.exception("op %s failed", op)
            return protocol.error(req_id, "InternalError", str(e))
        return protocol.ok(req_id, result)

    def _call(self, op, a: dict):
        policy = lambda: PollPolicy(float(a.get("delay", 0.5)), float(a.get("timeout", 2.0)))
        if op == "submit":
            return self.handle_submit(
                a["exp_id"], a["work_type"], a["payload"], a.get("priority", 0), a.get("tag")
            )
        if op == "query_task":
            res = self.handle_query_task(
                int(a["work_type"]), int(a.get("n", 1)), a.get("worker_pool", "default"), policy()
            )
            return [r.to_wire() for r in res]
        if op == "report":
            self.handle_report(a["task_id"], a["work_type"], a["result"], a.get("worker_pool"))
            return "ok"
        if op == "query_result":
            return self.handle_query_result(int(a["task_id"]), policy()).to_wire()
        if op == "update_priorities":
            return self.handle_update_priorities(a["updates"])
        if op == "cancel":
            return self.handle_cancel(a["task_ids"])
        if op == "requeue":
            return self.handle_requeue(a["worker_pool"])
        if op == "status":
            return self.handle_status(a["task_ids"])
        if op == "ping":
            return "pong"
        raise ValueError(f"unknown op {op!r}")


class _Handler(socketserver.StreamRequestHandler):
    def setup(self):
        super().setup()
        self.server.track(self.request, True)

    def finish(self):
        self.server.track(self.request, False)
        super().finish()

    def handle(self):
        broker: Broker = self.server.broker
        while not broker.stopping.is_set():
            try:
                line = self.rfile.readline()
            except OSError:
                return
            if not line:
                return
            if not line.strip():
                continue
            try:
                msg = protocol.decode(line)
            except protocol.ProtocolError as e:
                resp = protocol.error(None, e.code, str(e))
            else:
                with self.server.in_flight():
                    resp = broker.dispatch(msg)
            try:
                self.wfile.write(protocol.encode(resp))
                self.wfile.flush()
            except OSError:
                return


class BrokerServer(socketserver.ThreadingTCPServer):
    """A running broker. Use :func:`serve` to create one."""

    daemon_threads = True
    allow_reuse_address = False

    def __init__(self, address: tuple[str, int], broker: Broker, owns_store: bool = False):
        self.broker = broker
        self.owns_store = owns_store
        self._conns: set[socket.socket] = set()
        self._busy = 0
        self._cv = threading.Condition()
        self._thread: threading.Thread | None = None
        try:
            super().__init__(address, _Handler)
        except OSError as e:
            raise BindFailure(e.errno, f"cannot bind {address[0]}:{address[1]}: {e.strerror}") from e

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def track(self, sock, add: bool):
        with self._cv:
            (self._conns.add if add else self._conns.discard)(sock)

    @contextmanager
    def in_flight(self):
        with self._cv:
            self._busy += 1
        try:
            yield
        finally:
            with self._cv:
                self._busy -= 1
                self._cv.notify_all()

    def start(self) -> "BrokerServer":
        self._thread = threading.Thread(target=self.serve_forever, name="broker", daemon=True)
        self._thread.start()
        return self

    def stop(self, drain_timeout: float = 5.0) -> None:
        """Stop accepting, let in-flight requests finish, then close sessions."""
        self.broker.stopping.set()
        self.shutdown()
        with self._cv:
            self._cv.wait_for(lambda: self._busy == 0, timeout=drain_timeout)
            conns = list(self._conns)
        for sock in conns:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=drain_timeout)
        if self.owns_store:
            self.broker.store.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve(bind_address: str, store_handle, max_payload: int = DEFAULT_MAX_PAYLOAD) -> BrokerServer:
    """Start a broker on ``bind_address`` ("HOST:PORT"; port 0 picks a free one).

    ``store_handle`` is an open :class:`TaskStore` or a store directory path.
    """
    owns = not isinstance(store_handle, TaskStore)
    st = TaskStore(store_handle, max_payload=max_payload) if owns else store_handle
    try:
        server = BrokerServer(parse_address(bind_address), Broker(st), owns_store=owns)
    except BindFailure:
        if owns:
            st.close()
        raise
    logger.info("broker listening on %s (store %s)", server.address, st.path)
    return server.start()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="broker", description="Task broker service")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("serve", help="run the broker")
    p.add_argument("--bind", default="127.0.0.1:5555", help="HOST:PORT (port 0 = any)")
    p.add_argument("--store", required=True, type=Path, help="store directory")
    p.add_argument("--max-payload", type=int, default=DEFAULT_MAX_PAYLOAD)
    p.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        server = serve(args.bind, args.store, args.max_payload)
    except BindFailure as e:
        print(f"broker: {e}", file=sys.stderr)
        return 2
    except StoreOpenFailure as e:
        print(f"broker: {e}", file=sys.stderr)
        return 3
    # the bound address goes to stdout so launchers can use port 0
    print(f"listening {server.address}", flush=True)

    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    done.wait()
    server.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
