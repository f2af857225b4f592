import pytest

_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py::" in report.nodeid:
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        name = report.nodeid.split("::", 1)[1]
        _ACCEPTANCE.append(f"{'PASS' if report.passed else 'FAIL'}  {name}  {detail}".rstrip())
    elif report.when == "setup" and report.skipped and "test_acceptance.py::" in report.nodeid:
        _ACCEPTANCE.append(f"SKIP  {report.nodeid.split('::', 1)[1]}")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
