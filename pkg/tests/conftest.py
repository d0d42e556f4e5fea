"""Shared pytest hooks: collects acceptance-criterion verdict lines and
prints them after the run so they are visible even with output capture on."""

_verdicts = []


def record_verdict(line):
    _verdicts.append(line)


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria:")
        for line in _verdicts:
            terminalreporter.write_line(line)
