import numpy as np
import pytest
from hypothesis import settings

from ltvs_drl.env import LtvsEnv
from ltvs_drl.grid import builtin_case

settings.register_profile("ci", deadline=None, max_examples=50)
settings.load_profile("ci")

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(code, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    code, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed and not detail:
        detail = str(rep.longrepr).strip().splitlines()[-1][:200]
    _ACCEPTANCE[code] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for code in sorted(_ACCEPTANCE, key=lambda c: int(c.split("-")[1])):
        status, title, detail = _ACCEPTANCE[code]
        line = f"{code} {status}: {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def ltvs5():
    return builtin_case("ltvs5")


@pytest.fixture
def env(ltvs5):
    return LtvsEnv(ltvs5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
