import pytest


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def record_criterion(request):
    """Store one acceptance verdict for the end-of-run summary."""

    def record(number: int, status: str, detail: str) -> None:
        request.config._acceptance[number] = (status, detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
