"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            match = _CRITERION.search(getattr(report, "nodeid", ""))
            if not match or report.when not in ("call", "setup"):
                continue
            n = int(match.group(1))
            if n in lines and outcome == "passed":
                continue
            detail = dict(report.user_properties).get("detail", "")
            status = "PASS" if outcome == "passed" else "FAIL"
            lines[n] = f"criterion {n:2d} {status}  {match.group(2).replace('_', ' ')}" + \
                (f"  [{detail}]" if detail else "")
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
