"""Newline-delimited JSON wire format shared by the broker and its clients.

Requests are ``{"op": str, "args": {...}, "req_id": int}``; responses echo
``req_id`` and carry either ``"result"`` or
``"error": {"code": str, "message": str}``.  One object per line, UTF-8.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

from osprey import store

TIMEOUT = "TIMEOUT"
CANCELED = "CANCELED"

WORK = "work"
STATUS = "status"


class ProtocolError(Exception):
    code = "ProtocolError"


class RemoteError(Exception):
    """An error reported by the broker, carrying its wire ``code``."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


@dataclass(frozen=True)
class PollPolicy:
    """Polling delay and overall timeout, in seconds."""

    delay: float = 0.5
    timeout: float = 2.0

    def __post_init__(self):
        if not self.delay > 0:
            raise ValueError(f"delay must be > 0, got {self.delay}")
        if self.timeout < self.delay:
            raise ValueError(f"timeout ({self.timeout}) must be >= delay ({self.delay})")


@dataclass(frozen=True)
class WorkQueryResponse:
    kind: str
    payload: str
    task_id: int | None = None
    priority: int | None = None

    def __post_init__(self):
        if self.kind == WORK and self.task_id is None:
            raise ValueError("work response needs a task_id")
        if self.kind not in (WORK, STATUS):
            raise ValueError(f"unknown response kind {self.kind!r}")

    @classmethod
    def work(cls, task_id: int, payload: str, priority: int | None = None):
        return cls(WORK, payload, task_id, priority)

    @classmethod
    def status(cls, reason: str):
        return cls(STATUS, reason)

    @property
    def is_work(self) -> bool:
        return self.kind == WORK

    def to_wire(self) -> dict:
        if self.kind == WORK:
            d = {"type": WORK, "eq_task_id": self.task_id, "payload": self.payload}
            if self.priority is not None:
                d["priority"] = self.priority
            return d
        return {"type": STATUS, "payload": self.payload}

    @classmethod
    def from_wire(cls, d: dict) -> "WorkQueryResponse":
        return cls(d["type"], d["payload"], d.get("eq_task_id"), d.get("priority"))


def encode(msg: dict) -> bytes:
    return (json.dumps(msg, ensure_ascii=False, separators=(",", ":")) + "\n").encode("utf-8")


def decode(line: bytes | str) -> dict:
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ProtocolError(f"message is not UTF-8: {e}") from e
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"malformed JSON: {e}") from e
    if not isinstance(msg, dict):
        raise ProtocolError("message must be a JSON object")
    return msg


def request(op: str, args: dict[str, Any], req_id: int) -> dict:
    return {"op": op, "args": args, "req_id": req_id}


def ok(req_id, result) -> dict:
    return {"req_id": req_id, "result": result}


def error(req_id, code: str, message: str) -> dict:
    return {"req_id": req_id, "error": {"code": code, "message": message}}


_STORE_ERRORS = {
    cls.code: cls
    for cls in (
        store.PayloadTooLarge,
        store.StorageFailure,
        store.UnknownTask,
        store.InvalidTransition,
    )
}


def raise_for_error(msg: dict) -> Any:
    """Return ``msg["result"]`` or raise the error it carries.

    Store errors are re-raised as their own classes so callers see the same
    exception types locally and over the wire.
    """
    err = msg.get("error")
    if err is None:
        return msg.get("result")
    cls = _STORE_ERRORS.get(err.get("code"))
    if cls is not None:
        raise cls(err.get("message", ""))
    raise RemoteError(err.get("code", "Unknown"), err.get("message", ""))
