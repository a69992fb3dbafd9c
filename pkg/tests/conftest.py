import sys


def pytest_runtest_logreport(report):
    # One visible pass/fail line per acceptance criterion, printed outside capture.
    if "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        outcome = "PASS" if report.passed else "FAIL"
        sys.stderr.write(f"\n[acceptance] {name}: {outcome}\n")
    elif report.when == "setup" and report.skipped:
        sys.stderr.write(f"\n[acceptance] {name}: SKIP\n")
