import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line past output capture, then assert."""

    def record(criterion: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        _VERDICTS.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, detail

    return record


@pytest.fixture
def note(capsys):
    """Print a measured value past output capture."""

    def emit(text: str) -> None:
        _VERDICTS.append(text)
        with capsys.disabled():
            print(f"\n{text}")

    return emit


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
