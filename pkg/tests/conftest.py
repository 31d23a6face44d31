import pytest

# criterion number -> (passed, detail); filled by test_acceptance.verdict
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"CRITERION {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
