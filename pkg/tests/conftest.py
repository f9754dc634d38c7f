import pytest

_acceptance_lines: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Call ``criterion(n, ok, detail)`` once per acceptance criterion."""

    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        _acceptance_lines[n] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_acceptance_lines):
            terminalreporter.write_line(_acceptance_lines[n])
