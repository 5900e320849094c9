import numpy as np
import pytest
from hypothesis import settings

from syncsampler.diffusion import make_schedule

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def sched():
    return make_schedule("linear_beta", 1000)


@pytest.fixture(scope="session")
def cosine():
    return make_schedule("cosine", 1000)


@pytest.fixture
def rs():
    return np.random.default_rng(1234)


# --- acceptance reporting ---------------------------------------------------------------
# Tests marked ``acceptance(n, title)`` store a measurement string under the
# ``detail`` property; the terminal summary prints one PASS/FAIL line per criterion.

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.skipped:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.failed and n not in _ACCEPTANCE):
        details = [v for k, v in item.user_properties if k == "detail"]
        _ACCEPTANCE[n] = (title, rep.passed, details[-1] if details else rep.when + " error")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  [{n:2d}] {title}: {detail}")
