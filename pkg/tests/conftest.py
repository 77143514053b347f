import pytest

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        n, title = marker.args
        entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "details": []})
        entry["ok"] = entry["ok"] and rep.passed
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        detail = "; ".join(e["details"])
        line = f"criterion {n:>2} {'PASS' if e['ok'] else 'FAIL'}: {e['title']}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))


@pytest.fixture
def detail(request):
    """Attach a short measurement to the acceptance summary line."""
    def add(text):
        request.node.user_properties.append(("detail", text))
    return add
