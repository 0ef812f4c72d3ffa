import re

import numpy as np
import pytest

from dynlora import linalg
from dynlora.model import ModelConfig

from .helpers import small_config, trained_like


@pytest.fixture(params=linalg.available_backends())
def backend(request):
    with linalg.using_backend(request.param):
        yield request.param


@pytest.fixture
def small_model():
    return trained_like(small_config())


@pytest.fixture
def default_model():
    return trained_like(ModelConfig(seed=1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, list] = {}
_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+?)(\[|$)")


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m is None or (report.when != "call" and report.passed):
        return
    entry = _CRITERIA.setdefault(int(m.group(1)), [m.group(2), True])
    if report.failed:
        entry[1] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {name.replace('_', ' ')}")
