"""Prints one PASS/FAIL line per acceptance criterion at the end of the session."""

import re

_ACCEPTANCE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")
_results: dict[int, tuple[str, str, float, str]] = {}


def pytest_runtest_logreport(report):
    m = _ACCEPTANCE.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
    if report.when == "call" or report.outcome == "failed":
        verdict = "PASS" if report.passed else "FAIL"
        if n not in _results or verdict == "FAIL":
            _results[n] = (verdict, m.group(2).replace("_", " "), report.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        verdict, name, secs, detail = _results[n]
        line = f"criterion {n} {name}: {verdict} ({secs:.1f} s)"
        terminalreporter.write_line(line + (f" - {detail}" if detail else ""))
