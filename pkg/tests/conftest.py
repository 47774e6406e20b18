import numpy as np
import pytest

from filterprune.tensor_store import FilterBank, Tensor, WeightContainer, write_container

_acceptance = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion")
    config.addinivalue_line("markers", "slow: runs a full toy training")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    marker = _acceptance_marker.get(report.nodeid)
    if marker is None:
        return
    number, title = marker
    entry = _acceptance.setdefault(number, [title, True, []])
    if report.failed:
        entry[1] = False
        entry[2].append(report.nodeid.split("::")[-1])


_acceptance_marker = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            _acceptance_marker[item.nodeid] = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, ok, failed = _acceptance[number]
        line = f"[{'PASS' if ok else 'FAIL'}] {number}. {title}"
        if failed:
            line += f"  (failed: {', '.join(failed)})"
        terminalreporter.write_line(line)


# spec fixtures shared across modules

FOUR_FILTERS = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [10.0, 10.0]]


@pytest.fixture
def four_bank():
    return FilterBank.from_vectors(FOUR_FILTERS, "conv1")


@pytest.fixture
def four_container():
    data = np.array(FOUR_FILTERS, dtype=np.float32).reshape(4, 2, 1, 1)
    return WeightContainer({"conv1": Tensor(data)})


@pytest.fixture
def l1_container():
    data = np.array([[1, -2], [3, -4]], dtype=np.float32).reshape(2, 2, 1, 1)
    return WeightContainer({"conv1": Tensor(data)})


@pytest.fixture
def write(tmp_path):
    def _write(container, name="w.pktc"):
        path = tmp_path / name
        write_container(container, path)
        return path

    return _write


def random_bank(rng, n=None, k=None, c=None):
    n = n or int(rng.integers(1, 13))
    k = k or int(rng.choice([1, 3]))
    c = c or int(rng.integers(1, 5))
    t = Tensor(rng.normal(size=(n, c, k, k)).astype(np.float32))
    from filterprune.tensor_store import as_filter_bank

    return as_filter_bank(t, "rand")
