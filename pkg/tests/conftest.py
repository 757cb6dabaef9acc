import pytest

_VERDICTS = {}
_NOTES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    ok = rep.passed if rep.when == "call" else not (rep.failed or rep.skipped)
    _NOTES.setdefault(n, []).extend(v for k, v in item.user_properties if k == "acceptance" and rep.when == "call")
    prev = _VERDICTS.get(n, (title, True))
    _VERDICTS[n] = (title, prev[1] and ok)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        title, ok = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n} {title}: {'PASS' if ok else 'FAIL'}")
        for line in _NOTES.get(n, []):
            terminalreporter.write_line(f"    {line}")
