def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS, TITLES

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in sorted(TITLES.items()):
        if n in RESULTS:
            passed, detail = RESULTS[n]
            terminalreporter.write_line(f"{n:>2}. {'PASS' if passed else 'FAIL'}  {title}: {detail}")
        else:
            terminalreporter.write_line(f"{n:>2}. NOT RUN  {title}")
