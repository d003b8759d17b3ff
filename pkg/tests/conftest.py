import pytest

_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one acceptance verdict; the terminal summary lists them all."""
    def record(number, title, ok, detail):
        _ACCEPTANCE[number] = (title, bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[number]
        first, *rest = str(detail).splitlines() or [""]
        terminalreporter.write_line(f"acceptance {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {first}")
        for line in rest:
            terminalreporter.write_line(line)
