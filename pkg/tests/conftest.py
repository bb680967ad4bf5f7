"""Collects acceptance-criterion outcomes and prints one line per criterion at the end of the run."""

ACCEPTANCE = {}


def record(number, name, ok, detail=""):
    ACCEPTANCE[number] = (name, bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
