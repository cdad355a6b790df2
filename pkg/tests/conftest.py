import _acceptance


def pytest_terminal_summary(terminalreporter):
    if not _acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance.RESULTS):
        name, passed, detail = _acceptance.RESULTS[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {number:2d} {name}: {detail}")
