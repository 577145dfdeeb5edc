import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from zssmnet.nn import backend

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(params=backend.available())
def kernels(request):
    """Run the test once per importable kernel backend."""
    previous = backend.kernels
    backend.use(request.param)
    yield backend.kernels
    backend.kernels = previous


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Append one pass/fail line per acceptance criterion."""
    def report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
