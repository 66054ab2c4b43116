CRITERIA = {}


def record(number, passed, detail, seconds):
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}  [{seconds:.1f} s]"
    CRITERIA[number] = line
    return line


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
