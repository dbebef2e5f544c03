import pytest

OUTCOMES = pytest.StashKey[dict]()
DETAIL = pytest.StashKey[str]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")
    config.stash[OUTCOMES] = {}


@pytest.fixture
def detail(request):
    """Callable that attaches a one-line measurement to the criterion verdict."""

    def record(text):
        request.node.stash[DETAIL] = text
        print(text)

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and report.passed:
        return
    number, title = marker.args
    text = item.stash.get(DETAIL, "")
    if report.failed and not text:
        text = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
    item.config.stash[OUTCOMES][number] = (report.passed and report.when == "call", title, text)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = config.stash.get(OUTCOMES, {})
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(outcomes):
        passed, title, text = outcomes[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {number:>2}. {title}: {text}")
