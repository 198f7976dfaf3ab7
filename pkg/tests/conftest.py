from collections import Counter

from helpers import ACCEPTANCE

# outcomes of the invariant suite (every module except the acceptance file), for criterion 9
INVARIANTS: Counter = Counter()
XFAILED: list[str] = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        if hasattr(report, "wasxfail"):
            INVARIANTS["xfailed" if report.skipped else "xpassed"] += 1
            if report.skipped:
                XFAILED.append(report.nodeid.split("::")[-1])
        elif report.when == "call" or report.failed:
            INVARIANTS[report.outcome] += 1


def _criterion_9():
    fuzz = ACCEPTANCE.get(9)
    if fuzz is None or not INVARIANTS:
        return
    ok = fuzz[0] and not INVARIANTS["failed"] and not INVARIANTS["xfailed"]
    detail = f"{fuzz[1]}; invariant suite {INVARIANTS['passed']} passed, {INVARIANTS['failed']} failed"
    if XFAILED:
        detail += f", {len(XFAILED)} known-false as stated ({', '.join(XFAILED)})"
    ACCEPTANCE[9] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    _criterion_9()
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
