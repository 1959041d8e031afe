import pytest

_ACCEPTANCE_LINES: list[tuple[int, str]] = []


@pytest.fixture
def criterion(request):
    """Recorder for acceptance checks: ``criterion(n, ok, detail)``.

    Every acceptance test records exactly one line; a test that errors out
    before recording is reported as FAIL.
    """
    recorded = []

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        recorded.append(number)
        _ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok

    yield record
    if not recorded:
        number = getattr(request.function, "criterion_number", 0)
        _ACCEPTANCE_LINES.append((number, f"criterion {number:2d}: FAIL  {request.node.name} did not complete"))


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
