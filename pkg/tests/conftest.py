import pytest

_OUTCOMES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_OUTCOMES] = {}


@pytest.fixture
def criterion(request):
    """Free-form detail dict attached to an acceptance test's summary line."""
    detail: dict = {}
    request.node.criterion_detail = detail
    return detail


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return rep
    number = marker.args[0]
    outcomes = item.config.stash[_OUTCOMES]
    failed = rep.failed
    if rep.when == "call" or failed:
        ok, detail = outcomes.get(number, (True, {}))
        detail.update(getattr(item, "criterion_detail", {}))
        outcomes[number] = (ok and not failed, detail)
    return rep


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = config.stash[_OUTCOMES]
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(outcomes):
        ok, detail = outcomes[number]
        text = ", ".join(f"{k}={v}" for k, v in detail.items())
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {text}".rstrip())
