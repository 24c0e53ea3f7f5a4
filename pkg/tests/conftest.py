import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from healsht.sht import SphericalCoeffs

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_real_coeffs(l_max, rng, slope=0.0):
    """Gaussian a_lm of a real field: m = 0 entries real."""
    c = SphericalCoeffs.zeros(l_max)
    m = c.orders()
    l = c.degrees()
    data = rng.standard_normal(c.data.size) + 1j * rng.standard_normal(c.data.size)
    data[m == 0] = data[m == 0].real
    data *= (l + 1.0) ** (-0.5 * slope)
    return SphericalCoeffs(l_max, data)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    number, title = marker.args
    if rep.when == "call" or rep.failed:
        passed = rep.passed and _criteria.get(number, (title, True))[1]
        _criteria[number] = (title, passed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, passed = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {title}")
