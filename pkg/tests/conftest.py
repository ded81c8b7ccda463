"""Prints a one-line verdict per acceptance criterion at the end of a run
that included tests from test_acceptance.py."""

_results: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    detail = ""
    for key, value in report.user_properties:
        if key == "detail":
            detail = str(value)
    if report.when == "call":
        outcome = "PASS" if report.outcome == "passed" else "FAIL"
        _results[name] = (outcome, detail)
    elif report.when == "setup" and report.outcome != "passed":
        _results[name] = ("FAIL (setup)", detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(_results):
        outcome, detail = _results[name]
        suffix = f"  [{detail}]" if detail else ""
        terminalreporter.write_line(f"{name}: {outcome}{suffix}")
