import threading
import time

import pytest

from osprey.client import (
    BrokerClient,
    ConnectionLost,
    LengthMismatch,
    SubmitSpec,
    TaskCanceled,
    Timeout,
    as_completed,
    pop_completed,
    update_priority,
)
from osprey.store import TaskStatus

from conftest import FAST

Q, R, C, X = TaskStatus.QUEUED, TaskStatus.RUNNING, TaskStatus.COMPLETE, TaskStatus.CANCELED


def run_one(client, result="done", pool="p"):
    """Act as a single-task worker: pop the top task and report ``result``."""
    (w,) = client.query_task(0, 1, pool, timeout=0.5)
    client.report_task(w.task_id, 0, result, pool)
    return w.task_id


def test_submit_and_status_lifecycle(client):
    fut = client.submit(SubmitSpec("exp1", 0, '{"sample": [0, 0, 0, 0]}'))
    assert fut.status() is Q
    (w,) = client.query_task(0, 1, "p")
    assert fut.status() is R
    client.report_task(w.task_id, 0, "3.5")
    assert fut.status() is C
    assert fut.result() == "3.5"


def test_750_distinct_futures(client):
    futs = [client.submit_task("exp1", 0, f'{{"i": {i}}}') for i in range(750)]
    assert len({f.task_id for f in futs}) == 750


def test_submit_after_shutdown(broker):
    c = BrokerClient(broker.address)
    broker.stop()
    with pytest.raises(ConnectionLost):
        c.submit_task("e", 0, "{}")


def test_result_cached_without_wire_traffic(client):
    fut = client.submit_task("e", 0, "{}")
    run_one(client, "r1")
    assert fut.result(timeout=1) == "r1"
    client.close()  # any further request would raise ConnectionLost
    assert fut.result() == "r1"
    assert fut.status() is C


def test_result_timeout(client):
    fut = client.submit_task("e", 0, "{}")
    t0 = time.monotonic()
    with pytest.raises(Timeout):
        fut.result(timeout=0.5)
    assert 0.5 <= time.monotonic() - t0 < 0.9


def test_result_of_canceled(client):
    fut = client.submit_task("e", 0, "{}")
    assert fut.cancel()
    with pytest.raises(TaskCanceled):
        fut.result(timeout=1)
    assert fut.status() is X


def test_cancel_running_fails(client):
    fut = client.submit_task("e", 0, "{}")
    client.query_task(0, 1, "p")
    assert not fut.cancel()
    assert not fut.set_priority(9)
    assert fut.status() is R


def test_set_priority_changes_pop_order(client):
    a = client.submit_task("e", 0, "a")
    b = client.submit_task("e", 0, "b")
    assert b.set_priority(1)
    assert [w.task_id for w in client.query_task(0, 2, "p")] == [b.task_id, a.task_id]


def test_result_blocks_until_reported(broker, client):
    fut = client.submit_task("e", 0, "{}")

    def worker():
        with BrokerClient(broker.address) as w:
            time.sleep(0.3)
            run_one(w, "late")

    threading.Thread(target=worker).start()
    assert fut.result() == "late"


def test_as_completed_all(client):
    futs = [client.submit_task("e", 0, str(i)) for i in range(10)]
    for _ in range(10):
        run_one(client)
    got = list(as_completed(futs, count=10))
    assert len(got) == 10 and set(map(id, got)) == set(map(id, futs))


def test_as_completed_count_zero(client):
    futs = [client.submit_task("e", 0, "{}")]
    t0 = time.monotonic()
    assert list(as_completed(futs, count=0)) == []
    assert time.monotonic() - t0 < 0.05


def test_as_completed_count_too_large(client):
    with pytest.raises(ValueError):
        list(as_completed([client.submit_task("e", 0, "{}")], count=2))


def test_as_completed_yields_earliest(client):
    futs = [client.submit_task("e", 0, str(i), priority=i) for i in range(5)]
    # a single worker completes highest priority first: task 5, then 4
    first = run_one(client)
    time.sleep(0.01)
    run_one(client)
    (got,) = list(as_completed(futs, count=1))
    assert got.task_id == first == futs[-1].task_id


def test_as_completed_streams_and_times_out(broker, client):
    futs = [client.submit_task("e", 0, str(i)) for i in range(4)]
    run_one(client)
    seen = []
    with pytest.raises(Timeout):
        for f in as_completed(futs, timeout=0.3):
            seen.append(f)
    assert len(seen) == 1
    remaining = [f for f in futs if f not in seen]
    assert len(remaining) + len(seen) == len(futs)


def test_pop_completed(client):
    futs = [client.submit_task("e", 0, str(i)) for i in range(5)]
    done_id = run_one(client)
    f = pop_completed(futs)
    assert f.task_id == done_id and len(futs) == 4


def test_pop_completed_timeout_leaves_list(client):
    futs = [client.submit_task("e", 0, str(i)) for i in range(3)]
    before = list(futs)
    with pytest.raises(Timeout):
        pop_completed(futs, timeout=0.3)
    assert futs == before


def test_pop_completed_until_empty(client):
    futs = [client.submit_task("e", 0, str(i)) for i in range(6)]
    original = list(futs)
    for _ in range(6):
        run_one(client)
    popped = []
    while futs:
        popped.append(pop_completed(futs, timeout=1))
    assert sorted(f.task_id for f in popped) == sorted(f.task_id for f in original)


def test_pop_completed_empty_list():
    with pytest.raises(ValueError):
        pop_completed([])


def test_update_priority_batch(client):
    futs = [client.submit_task("e", 0, "{}") for _ in range(700)]
    assert update_priority(futs, list(range(1, 701))) == 700
    assert update_priority([], []) == 0
    with pytest.raises(LengthMismatch):
        update_priority(futs, [1, 2])


def test_update_priority_skips_running(client):
    futs = [client.submit_task("e", 0, "{}") for _ in range(10)]
    running = {w.task_id for w in client.query_task(0, 3, "p")}
    assert update_priority(futs, [5] * 10) == 7
    for f in futs:
        assert f.status() is (R if f.task_id in running else Q)


def test_batch_update_equals_individual_updates(broker):
    prios = [3, 9, 1, 9, 4]

    def pop_order(batch):
        with BrokerClient(broker.address, FAST) as c:
            futs = [c.submit_task("e", 42, "{}") for _ in prios]
            if batch:
                update_priority(futs, prios)
            else:
                for f, p in zip(futs, prios):
                    f.set_priority(p)
            order = [futs.index(next(f for f in futs if f.task_id == w.task_id))
                     for w in c.query_task(42, len(prios), "p")]
        return order

    assert pop_order(True) == pop_order(False) == [1, 3, 4, 0, 2]
