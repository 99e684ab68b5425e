"""Shared fixtures and the acceptance-criterion report.

Tests marked ``@pytest.mark.criterion(n, title)`` record a PASS/FAIL line
through the ``criterion`` fixture; the lines are printed at the end of the
session in criterion order. A marked test that errors or fails before
recording is reported as FAIL with its exception.
"""

import numpy as np
import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number n")


class Criterion:
    def __init__(self, number, title):
        self.number = number
        self.title = title
        self.details: list[str] = []
        self.ok = True

    def check(self, ok, detail):
        """Record one sub-check; the criterion passes only if all do."""
        ok = bool(ok)
        self.ok &= ok
        self.details.append(("" if ok else "FAILED ") + detail)
        _RESULTS[self.number] = {"title": self.title, "ok": self.ok,
                                 "detail": "; ".join(self.details)}
        return ok

    def note(self, detail):
        self.details.append(detail)
        if self.number in _RESULTS:
            _RESULTS[self.number]["detail"] = "; ".join(self.details)


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    if marker is None:
        pytest.fail("the criterion fixture needs a @pytest.mark.criterion marker")
    return Criterion(*marker.args)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    n, title = marker.args
    entry = _RESULTS.setdefault(n, {"title": title, "ok": True, "detail": ""})
    if rep.failed:
        entry["ok"] = False
        if call.excinfo is not None and not entry["detail"]:
            entry["detail"] = call.excinfo.exconly().splitlines()[0][:200]
    elif rep.skipped:
        entry["ok"] = False
        entry["detail"] = entry["detail"] or "skipped"


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        r = _RESULTS[n]
        status = "PASS" if r["ok"] else "FAIL"
        tr.write_line(f"[{status}] AC{n:02d} {r['title']}: {r['detail']}")
    passed = sum(r["ok"] for r in _RESULTS.values())
    tr.write_line(f"{passed}/{len(_RESULTS)} acceptance criteria passed")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
