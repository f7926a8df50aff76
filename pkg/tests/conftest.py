import pytest

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, passed, detail)`` records one acceptance line for the run summary."""
    results = request.config.stash[ACCEPTANCE]

    def record(n, passed, detail):
        results[n] = (bool(passed), detail)
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'} | {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[ACCEPTANCE]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'} | {detail}")
