import json

import pytest

from osprey.broker import serve
from osprey.client import BrokerClient
from osprey.protocol import PollPolicy
from osprey.store import TaskStore

FAST = PollPolicy(0.02, 0.2)


@pytest.fixture
def store(tmp_path):
    st = TaskStore(tmp_path / "store")
    yield st
    st.close()


@pytest.fixture
def broker(tmp_path):
    server = serve("127.0.0.1:0", tmp_path / "broker-store")
    yield server
    server.stop()


@pytest.fixture
def client(broker):
    c = BrokerClient(broker.address, FAST)
    yield c
    c.close()


def sleep_payload(secs=0.0, **extra):
    return json.dumps({"sleep": secs, **extra})


# -- acceptance reporting ------------------------------------------------------

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion covered by a test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    n, text = mark.args
    passed = call.excinfo is None
    prev = _criteria.get(n)
    ok = passed and (prev is None or prev[1] == "PASS")
    _criteria[n] = (text, "PASS" if ok else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        text, verdict = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {text}")
