import numpy as np
import pytest

from funnelmpc.core import FunnelSpec, constant_reference, cosine_reference


@pytest.fixture
def reactor_funnel():
    return FunnelSpec(100.0, 2.0, 1.5)


@pytest.fixture
def reactor_ref():
    return constant_reference(337.1)


@pytest.fixture
def moc_funnel():
    return FunnelSpec(5.0, 2.0, 0.2)


@pytest.fixture
def moc_ref():
    return cosine_reference(1.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
