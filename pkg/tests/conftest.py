from acceptance_report import CRITERIA, RESULTS


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name in CRITERIA.items():
        if number in RESULTS:
            terminalreporter.write_line(RESULTS[number][2])
        else:
            terminalreporter.write_line(f"criterion {number:>2} [{name}]: NOT RUN")
