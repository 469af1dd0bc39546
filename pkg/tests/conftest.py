import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_results: dict = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2).replace("_", " "))
    entry = _results.setdefault(key, {"passed": True, "details": []})
    if report.failed:
        entry["passed"] = False
    if report.when == "call":
        entry["details"] = [f"{k}={v}" for k, v in report.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), entry in sorted(_results.items()):
        status = "PASS" if entry["passed"] else "FAIL"
        details = ("  " + ", ".join(entry["details"])) if entry["details"] else ""
        terminalreporter.write_line(f"criterion {num:2d} {status}  {name}{details}")
