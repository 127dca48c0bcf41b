"""Collects one status line per acceptance criterion and prints them at the end of the run."""

CRITERIA = []


def report(number: int, name: str, ok, detail: str):
    status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    line = f"{status} criterion {number:2d} ({name}): {detail}"
    CRITERIA.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(CRITERIA):
        terminalreporter.write_line(line)
