import os

import numpy as np
import pytest
import torch

from ustex.kernels import _numpy

try:
    from ustex.kernels import _numba
except ImportError:  # numba missing: only the fallback is exercised
    _numba = None

torch.set_num_threads(1)

BACKENDS = [pytest.param(_numpy, id="numpy")]
if _numba is not None:
    BACKENDS.append(pytest.param(_numba, id="numba"))


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance summary: test_acceptance records (criterion, passed, detail) here
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def record_criterion():
    def record(name: str, passed: bool, detail: str = ""):
        ACCEPTANCE_RESULTS.append((name, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: _criterion_key(r[0])):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status} {name}" + (f" | {detail}" if detail else ""))


def _criterion_key(name: str):
    head = name.split()[0].rstrip(".:")
    return (int(head), name) if head.isdigit() else (10 ** 6, name)


def pytest_collection_modifyitems(config, items):
    if os.environ.get("USTEX_SKIP_SLOW"):
        skip = pytest.mark.skip(reason="USTEX_SKIP_SLOW is set")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip)
