import pytest

_RESULTS: list[tuple[int, str, bool, str]] = []


class _Recorder:
    def __call__(self, number: int, name: str, passed: bool, detail: str = "") -> bool:
        _RESULTS.append((number, name, bool(passed), detail))
        return bool(passed)


@pytest.fixture
def criterion():
    """Record one acceptance line; the test still asserts on its own."""
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_RESULTS):
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
