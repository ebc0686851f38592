"""Shared pytest hooks: echo the acceptance checklist after the run."""

acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not acceptance_lines:
        return
    terminalreporter.section("acceptance checklist")
    for line in acceptance_lines:
        terminalreporter.write_line(line)
