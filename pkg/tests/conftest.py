"""Shared pytest configuration.

Acceptance tests record one line per criterion in ``ACCEPTANCE``; the lines
are printed in the terminal summary so they show up without ``-s``.
"""

ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (len(k), k)):
        terminalreporter.write_line(ACCEPTANCE[key])
