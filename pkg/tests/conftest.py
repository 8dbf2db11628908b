import numpy as np
import pytest

from colam.training import TrainConfig, prepare_dataset

SMALL_DATA = {"kind": "synthetic", "preset": "triblob", "dim": 8, "train_per_class": 40, "test_per_class": 20}


def small_config(**kw) -> TrainConfig:
    base = dict(stages=2, epochs_per_stage=3, hidden=[16, 16], batch_size=16, peers=5, data=dict(SMALL_DATA))
    base.update(kw)
    return TrainConfig(**base).validate()


@pytest.fixture
def small_cfg():
    return small_config()


@pytest.fixture
def small_ds(small_cfg):
    ds, _ = prepare_dataset(small_cfg)
    return ds


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary: one PASS/FAIL line per criterion at the end of the run --

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call" and not report.failed:
        return
    number, title = marker.args
    details = [v for k, v in item.user_properties if k == "detail"]
    _ACCEPTANCE[number] = (title, report.passed, details)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, details = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}")
        for line in details:
            terminalreporter.write_line(f"    {line}")
