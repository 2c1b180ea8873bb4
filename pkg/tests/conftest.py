"""Collects acceptance verdicts so they show in the terminal summary."""
import re

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(re.match(r"\d+", k).group()), k)):
        terminalreporter.write_line(ACCEPTANCE[key])


def verdict(num, title, ok, detail):
    """Record and print one pass/fail line; returns ``ok`` for the assert."""
    line = f"{'PASS' if ok else 'FAIL'} [{num}] {title}: {detail}"
    ACCEPTANCE[num] = line
    print(line)
    return ok
