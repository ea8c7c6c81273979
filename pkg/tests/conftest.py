import re

CRITERIA: dict[int, tuple[str, str, str]] = {}
_PATTERN = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    num = int(m.group(1))
    name = m.group(2).replace("_", " ")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
        CRITERIA[num] = (name, "PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        name, status, detail = CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d} {status}  {name}" + (f"  [{detail}]" if detail else ""))
