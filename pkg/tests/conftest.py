import numpy as np
import pytest

from flowguide.core import SeededRng
from flowguide.fields import OracleField
from flowguide.pipeline import DISK, SQUARE, standard_benchmark, trajectory_bank
from flowguide.toy_world import Dataset, build_dataset

_CRITERIA = {}
_NOTES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    key = (marker.args[0], marker.args[1])
    results = _CRITERIA.setdefault(key, [])
    results.append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), results in sorted(_CRITERIA.items(), key=lambda kv: str(kv[0][0])):
        status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {title}  ({sum(results)}/{len(results)} checks)")
        for line in _NOTES.get(number, []):
            terminalreporter.write_line(f"    {line}")


@pytest.fixture
def note(request):
    """Record a measured value to print under the test's criterion in the summary."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        _NOTES.setdefault(marker.args[0], []).append(text)
    return add


@pytest.fixture
def rng():
    return SeededRng(1234, 0)


def tiny_dataset(values, labels=None, classes=None, frames=1):
    """Dataset of hand-written latents; each row becomes a ``(frames, 1, len / frames, 1)`` latent."""
    lat = np.asarray(values, dtype=np.float32)
    lat = lat.reshape(len(lat), frames, 1, -1, 1)
    labels = np.zeros(len(lat), int) if labels is None else np.asarray(labels)
    classes = classes or {int(c): DISK if c == 0 else SQUARE for c in set(labels.tolist())}
    return Dataset(lat, labels, classes, video_shape=lat.shape[1:4])


@pytest.fixture
def single_item():
    """A 1-item dataset of a rendered 4-frame 16x16 disk and its oracle."""
    ds = build_dataset([(DISK, trajectory_bank(4, 16)[0])], 4, 16, 16)
    return ds, OracleField(ds)


@pytest.fixture(scope="session")
def benchmark():
    dataset, jobs = standard_benchmark()
    return dataset, jobs, OracleField(dataset)
