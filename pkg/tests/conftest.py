"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end."""

import pytest

CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    n, title = marker.args
    detail = ", ".join(getattr(item, "criterion_detail", []))
    CRITERIA[n] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status, title, detail = CRITERIA[n]
        line = f"[{status}] {n:2d}. {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))


@pytest.fixture
def detail(request):
    """Tests store a short measurement summary here for the criterion line."""
    parts: list[str] = []
    request.node.criterion_detail = parts
    return parts
