import pytest

# criterion number -> (passed, description, detail); filled by test_acceptance
ACCEPTANCE = {}


def record(number: int, name: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE[number] = (bool(passed), name, detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, name, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} [{number:2d}] {name}: {detail}")


@pytest.fixture
def record_criterion():
    return record
