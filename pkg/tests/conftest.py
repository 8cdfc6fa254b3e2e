"""Collects the one-line acceptance verdicts and prints them at the end of the run."""

ACCEPTANCE_LINES = {}


def record(criterion, passed, detail):
    line = f"AC{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
