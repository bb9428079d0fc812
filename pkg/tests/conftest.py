import pytest

_LINES: list[tuple[int, str]] = []


@pytest.fixture
def criterion():
    """``report(n, title, ok, detail)`` prints one PASS/FAIL line and returns ``ok``."""

    def report(n: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {title}" + (f" [{detail}]" if detail else "")
        print(line)
        _LINES.append((n, line))
        return bool(ok)

    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
