import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.acceptance = {}


@pytest.fixture
def verdict(request):
    """Record a criterion outcome, then assert it."""
    marker = request.node.get_closest_marker("criterion")

    def record(ok: bool, detail: str) -> None:
        request.config.acceptance[marker.args[0]] = (bool(ok), detail)
        assert ok, detail

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and rep.when == "call" and rep.failed:
        n = marker.args[0]
        if n not in item.config.acceptance:
            item.config.acceptance[n] = (False, f"error: {call.excinfo.typename}: "
                                                f"{str(call.excinfo.value)[:200]}")


def pytest_terminal_summary(terminalreporter, config):
    results = config.acceptance
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
