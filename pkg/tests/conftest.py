import pytest

# acceptance verdict lines, printed in the terminal summary
VERDICTS = []


@pytest.fixture
def verdict():
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        VERDICTS.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
