"""Shared test plumbing: collects acceptance-criterion verdict lines and
prints them as a section in the terminal summary, where output capture
cannot swallow them."""

_criterion_lines: list[str] = []


def record_criterion(line: str) -> None:
    _criterion_lines.append(line)


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in _criterion_lines:
            terminalreporter.write_line(line)
