import numpy as np
import pytest
from PIL import Image

from ctkidney.fixture import make_fixture, synthetic_arrays


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    return make_fixture(tmp_path_factory.mktemp("fixture"), n_per_class=10, size=64, seed=0)


@pytest.fixture(scope="session")
def synthetic():
    return synthetic_arrays(10, 64, seed=0)


def write_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)
    return path


@pytest.fixture
def make_tree(tmp_path):
    """Build a class-per-directory tree from {class: count}, in the given order."""

    def _make(counts, size=8):
        for name, n in counts.items():
            for i in range(n):
                write_png(tmp_path / name / f"{i:05d}.png", np.full((size, size), (i * 7) % 256))
        return tmp_path

    return _make


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    key = (marker.args[0], marker.args[1])
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        if call.excinfo is None:
            outcome = "PASS"
        elif call.excinfo.errisinstance(pytest.skip.Exception):
            outcome = "SKIP"
        else:
            outcome = "FAIL"
        if _ACCEPTANCE.get(key) != "FAIL":
            _ACCEPTANCE[key] = outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for (n, title), outcome in sorted(_ACCEPTANCE.items()):
        terminalreporter.write_line(f"criterion {n}: {outcome:4s} {title}")
