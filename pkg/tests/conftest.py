import pytest

CRITERIA: dict[int, str] = {}


def record(number: int, ok: bool, detail: str, soft: bool = False):
    tag = "PASS" if ok else ("SOFT-FAIL" if soft else "FAIL")
    line = f"criterion {number:2d}: {tag}  {detail}"
    CRITERIA[number] = line
    print(line)
    return ok


@pytest.fixture
def criterion():
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
