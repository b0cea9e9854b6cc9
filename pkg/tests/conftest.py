import numpy as np
import pytest
from scipy import ndimage

from spermnet import synthetic


def smooth_texture(size, seed=0, sigma=2.0):
    rng = np.random.default_rng(seed)
    t = ndimage.gaussian_filter(rng.random((size, size)), sigma, mode="wrap")
    return (t - t.min()) / (t.max() - t.min())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Three short image-sequence videos with labels and a round-robin fold file."""
    return synthetic.make_corpus(tmp_path_factory.mktemp("corpus"), n_videos=3, seed=7, n_frames=16, size=48)


# -- acceptance summary ------------------------------------------------------

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or report.failed or report.skipped):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, [title, "PASS"])
    if report.failed:
        entry[1] = "FAIL"
    elif report.skipped and entry[1] == "PASS":
        entry[1] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")
