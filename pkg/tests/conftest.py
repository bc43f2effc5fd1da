import pytest

# one line per acceptance criterion, printed in the terminal summary
_LINES: dict[str, str] = {}


@pytest.fixture
def criterion(request):
    def record(cid: str, title: str, passed: bool, detail: str):
        line = f"{'PASS' if passed else 'FAIL'} {cid} {title}: {detail}"
        _LINES[request.node.nodeid] = line
        print(line)
        assert passed, line

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    # a criterion that crashed before reporting still gets its FAIL line
    if rep.when == "call" and rep.failed and "criterion" in item.fixturenames and item.nodeid not in _LINES:
        doc = (item.obj.__doc__ or item.name).strip().splitlines()[0]
        _LINES[item.nodeid] = f"FAIL {doc}: {call.excinfo.typename}: {call.excinfo.value}"


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES.values():
            terminalreporter.write_line(line)
