import pytest

_results: list[tuple[int, str, str, float]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call":
        if mark is not None and report.when == "setup" and report.failed:
            _results.append((mark.args[0], mark.args[1], "FAIL", 0.0))
        return
    _results.append((mark.args[0], mark.args[1], "PASS" if report.passed else "FAIL", report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, secs in sorted(_results):
        terminalreporter.write_line(f"{status} criterion {number:>2}: {title} ({secs:.1f} s)")
