"""Shared pytest plumbing: the acceptance-criteria summary block.

Acceptance tests register one verdict line each via record_criterion; the
terminal-summary hook prints them after the run so the pass/fail status of
every criterion is visible in one place regardless of verbosity.
"""

_CRITERIA: list = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    _CRITERIA.append((number, title, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_CRITERIA):
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{verdict} criterion {number} ({title}): {detail}")
