"""Shared test plumbing: the acceptance suite records one line per criterion
and this hook replays them after the run, even under output capture."""

CRITERIA_LINES = []


def record_criterion(name: str, ok: bool, detail: str = "") -> None:
    line = "[%s] %s" % ("PASS" if ok else "FAIL", name)
    if detail:
        line += " (%s)" % detail
    CRITERIA_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)
