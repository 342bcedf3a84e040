"""Pytest hooks shared by the suite.

The terminal-summary hook turns the acceptance tests into a scoreboard:
one line per numbered criterion so a failing gate is readable at a glance
without digging through tracebacks.
"""
import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d{2})_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows: dict[str, tuple[str, str]] = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            match = _CRITERION.search(getattr(rep, "nodeid", ""))
            if not match:
                continue
            num, label = match.group(1), match.group(2).replace("_", " ")
            verdict = "pass" if outcome == "passed" else "FAIL"
            # a criterion that failed anywhere (setup included) stays FAIL
            if rows.get(num, ("", "pass"))[1] != "FAIL":
                rows[num] = (label, verdict)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(rows):
        label, verdict = rows[num]
        terminalreporter.write_line(f"criterion {num} {verdict:<4} {label}")
