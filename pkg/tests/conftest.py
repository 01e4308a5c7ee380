import time
from contextlib import contextmanager

import pytest

_LOG = pytest.StashKey[dict]()


class AcceptanceLog:
    """Collects one verdict per numbered criterion for the terminal summary."""

    def __init__(self, store: dict):
        self.store = store

    @contextmanager
    def check(self, number: int, title: str, budget_s: float | None = None):
        start = time.perf_counter()
        entry = {"title": title, "ok": False, "detail": "raised before completing"}
        self.store[number] = entry
        notes = []
        yield notes
        elapsed = time.perf_counter() - start
        entry["detail"] = "; ".join(notes + [f"{elapsed:.1f} s"])
        if budget_s is not None and elapsed > budget_s:
            entry["detail"] += f" (budget {budget_s:g} s exceeded)"
            raise AssertionError(f"criterion {number} took {elapsed:.1f} s, budget {budget_s:g} s")
        entry["ok"] = True


def pytest_configure(config):
    config.stash[_LOG] = {}


@pytest.fixture(scope="session")
def acceptance(request):
    return AcceptanceLog(request.config.stash[_LOG])


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_LOG, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        e = store[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}  [{e['detail']}]")
