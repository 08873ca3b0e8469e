"""Shared pytest hooks: always-visible acceptance-criterion summary.

The acceptance tests print one pass/fail line each as they run (visible with
``-s``); stdout capture would hide those on a plain run, so they are also
replayed in a summary section after the test run.
"""

acceptance_results = []  # (criterion number, label, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for num, label, ok, detail in sorted(acceptance_results):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {num} [{label}]: {status}  {detail}")
