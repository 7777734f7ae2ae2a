import numpy as np
import pytest

from flexscene.worldsim import WorldConfig, clip_seed, generate_clip


@pytest.fixture(scope="session")
def world():
    return WorldConfig()


@pytest.fixture(scope="session")
def clips(world):
    """Twelve default clips shared read-only across tests."""
    return [generate_clip(clip_seed(11, i), world, i) for i in range(12)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---- acceptance reporting: one PASS/FAIL line per criterion --------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, name = mark.args
    if rep.when == "setup" and rep.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed:
        detail = (detail + " | " if detail else "") + (rep.longrepr.reprcrash.message.splitlines()[0]
                                                        if hasattr(rep.longrepr, "reprcrash") else "error")
    _CRITERIA[n] = (name, "PASS" if rep.passed else "FAIL", rep.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, verdict, secs, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {verdict} {name} ({secs:.1f} s) {detail}".rstrip())
