import os
from pathlib import Path

import numpy as np
import pytest

from spikebench.data import Dataset, load_idx

DATA_DIR = Path(__file__).parent / "data"
MNIST_IMAGES = DATA_DIR / "mnist5k-images-idx3-ubyte.gz"
MNIST_LABELS = DATA_DIR / "mnist5k-labels-idx1-ubyte.gz"

_criteria = {}


@pytest.fixture(scope="session")
def mnist5k() -> Dataset:
    return load_idx(MNIST_IMAGES, MNIST_LABELS)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def out_dir(tmp_path, monkeypatch):
    d = tmp_path / "out"
    monkeypatch.setenv("SPIKEBENCH_OUT", str(d))
    monkeypatch.chdir(tmp_path)
    return d


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    num, title = crit
    detail = dict(report.user_properties).get("detail", "")
    _criteria[num] = (title, report.outcome, detail)


@pytest.fixture(autouse=True)
def _criterion_tag(request):
    m = request.node.get_closest_marker("criterion")
    if m is not None:
        request.node.user_properties.append(("criterion", tuple(m.args)))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in range(1, max(_criteria) + 1):
        if num not in _criteria:
            terminalreporter.write_line(f"criterion {num:>2} NOT RUN")
            continue
        title, outcome, detail = _criteria[num]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {num:>2} {verdict}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


def pytest_collection_modifyitems(config, items):
    # keep the acceptance suite last so unit failures surface first
    items.sort(key=lambda it: os.path.basename(str(it.fspath)) == "test_acceptance.py")
