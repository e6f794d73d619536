import sys

RESULTS = {}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"CRITERION {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    RESULTS[number] = line
    print(line, file=sys.stderr)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[number])
