import pytest

_RESULTS = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = dict(item.user_properties).get("detail", "")
        status = "PASS" if report.passed else "FAIL"
        _RESULTS.append((marker.args[0], marker.args[1], status, report.duration, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, duration, detail in sorted(_RESULTS):
        line = f"criterion {number:2d} {status}  {title}  ({duration:.1f} s)"
        if detail:
            line += f"  {detail}"
        terminalreporter.write_line(line)
