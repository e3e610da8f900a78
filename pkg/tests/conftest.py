"""Shared pytest hooks: the acceptance-criteria scoreboard."""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    try:
        from test_acceptance import CRITERIA, RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        title = CRITERIA[num]
        if num in RESULTS:
            ok, detail = RESULTS[num]
            status = "PASS" if ok else "FAIL"
            tail = f"  [{detail}]" if detail else ""
        else:
            status, tail = "SKIP", ""
        terminalreporter.write_line(f"criterion {num:02d} {status}  {title}{tail}")
