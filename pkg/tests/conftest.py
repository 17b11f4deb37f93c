import numpy as np
import pytest
import torch

from grainedvad.data import SyntheticSpec, generate_synthetic_dataset

torch.set_num_threads(1)

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    n, title = crit
    prev = _CRITERIA.get(n, (title, True))
    _CRITERIA[n] = (title, prev[1] and report.outcome == "passed")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A quick separable dataset: 8 + 8 training videos, 4 + 4 test videos."""
    out = tmp_path_factory.mktemp("small")
    spec = SyntheticSpec(n_normal=8, n_abnormal=8, n_test_normal=4, n_test_abnormal=4,
                         T=12, D=8, D_t=4, n_crops=2, anomaly_window=(3, 6),
                         anomaly_channel="both", shift_magnitude=2.0, seed=3)
    train_m, test_m = generate_synthetic_dataset(spec, out)
    return out, spec, train_m, test_m
