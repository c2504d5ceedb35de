import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    def add(criterion: str, ok: bool | None, detail: str) -> bool | None:
        # ok=None marks an informational line
        tag = "INFO" if ok is None else "PASS" if ok else "FAIL"
        ACCEPTANCE_LINES.append(f"{tag}  {criterion}: {detail}")
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
