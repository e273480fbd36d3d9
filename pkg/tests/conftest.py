"""Test-session plugin: replay the acceptance-gate transcript after the run.

In-test prints — even to ``sys.__stdout__`` — land in pytest's fd-level
capture, so the one-line-per-criterion verdicts would vanish from piped
output.  The terminal-summary hook writes the collected transcript through
pytest's own reporter, which always reaches the real stdout.
"""

import helpers


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if helpers.acceptance_transcript:
        terminalreporter.section("acceptance criteria")
        for line in helpers.acceptance_transcript:
            terminalreporter.write_line(line)
