import pytest

# filled by the acceptance suite: (criterion number, passed, detail)
ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture
def acceptance_line(capsys):
    def report(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE.append((number, passed, detail))
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if passed else 'FAIL'}: {detail}")
    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
