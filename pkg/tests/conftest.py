"""Prints one pass/fail line per acceptance criterion at the end of the session."""

_RESULTS = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.outcome == "failed":
        _RESULTS[props["criterion"]] = (report.outcome, props.get("title", ""),
                                        props.get("detail", ""), report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        outcome, title, detail, duration = _RESULTS[number]
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {number:2d} {status}  {title} ({duration:.1f} s)"
        terminalreporter.write_line(line + (f"  {detail}" if detail else ""))
