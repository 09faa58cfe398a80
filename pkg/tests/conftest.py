import numpy as np
import pytest

from openfeat import _kernels
from openfeat.bank import GenParams, generate_bank

BACKENDS = ["numpy"]
try:
    _kernels.get_backend("cython")
    BACKENDS.append("cython")
except ImportError:
    pass


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = _kernels.use_backend(request.param)
    yield request.param
    _kernels.use_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_bank():
    return generate_bank(GenParams(num_speakers=40, utts_per_speaker=16, dim=8,
                                   cluster_spread=0.2, similarity_groups=4,
                                   group_pull=0.7, seed=11))


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Record one ``criterion N: PASS|FAIL detail`` line for the terminal summary."""
    def record(num, passed, detail):
        line = f"criterion {num}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
