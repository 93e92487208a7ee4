"""Priority task broker, futures client, worker pools and a GPR-guided Ackley workflow."""

from osprey.client import (
    BrokerClient,
    ConnectionLost,
    SubmitSpec,
    TaskCanceled,
    TaskFuture,
    Timeout,
    as_completed,
    pop_completed,
    update_priority,
)
from osprey.protocol import PollPolicy, WorkQueryResponse
from osprey.store import TaskStatus, TaskStore

__version__ = "0.1.0"
