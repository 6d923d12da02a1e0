import re
import sys
from collections import defaultdict
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# acceptance tests are named test_c<N>_...; a criterion passes when all of its tests pass
_CRITERION = re.compile(r"test_acceptance\.py::test_c(\d+)_")
_outcomes: dict[int, list[str]] = defaultdict(list)
_details: dict[int, list[str]] = defaultdict(list)


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        _outcomes[n].append(report.outcome)
    if report.when == "call":
        _details[n].extend(f"{k}={v}" for k, v in report.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        ok = all(o == "passed" for o in _outcomes[n])
        extra = ", ".join(_details[n])
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {extra}".rstrip())
