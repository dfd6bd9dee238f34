import pytest

_RESULTS = pytest.StashKey[dict]()


class AcceptanceRecorder:
    def __init__(self, store):
        self.store = store

    def record(self, number, title, ok, detail=""):
        self.store[number] = (title, bool(ok), detail)
        print(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title} -- {detail}")
        return ok


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def acceptance(request):
    return AcceptanceRecorder(request.config.stash[_RESULTS])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, detail = results[number]
        terminalreporter.write_line(
            f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title} -- {detail}")
