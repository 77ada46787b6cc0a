"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import re

_RESULTS: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    match = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not match:
        return
    number, title = match.groups()
    if report.when == "call" or report.failed or (report.when == "setup" and report.skipped):
        if report.passed:
            verdict = "PASS"
        elif report.skipped:
            verdict = "SKIP"
        else:
            verdict = "FAIL"
        prev = _RESULTS.get(number, (title, "PASS"))[1]
        _RESULTS[number] = (title, verdict if prev == "PASS" else prev)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS, key=int):
        title, verdict = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number} ({title.replace('_', ' ')}): {verdict}")
