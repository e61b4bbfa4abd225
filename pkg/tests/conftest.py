import numpy as np
import pytest

from aortacascade.phantom import PhantomSpec, generate_phantom


@pytest.fixture(scope="session")
def default_phantom():
    """Default 256³ / 2 mm phantom as ``(spec, volume, mask)``."""
    spec = PhantomSpec()
    volume, mask = generate_phantom(spec)
    return spec, volume, mask


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
