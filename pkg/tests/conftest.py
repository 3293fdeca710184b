"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_TITLES: dict[int, str] = {}
_OUTCOMES: dict[int, list[tuple[str, bool]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    _TITLES[number] = title
    # a failed setup (e.g. the shared toy run) counts against the criterion too
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _OUTCOMES.setdefault(number, []).append((item.name, report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        results = _OUTCOMES[number]
        ok = all(passed for _, passed in results)
        line = f"criterion {number} ({_TITLES[number]}): {'PASS' if ok else 'FAIL'}"
        failed = [name for name, passed in results if not passed]
        if failed:
            line += f"  [failing: {', '.join(failed)}]"
        terminalreporter.write_line(line)
