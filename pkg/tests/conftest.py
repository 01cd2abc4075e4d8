import asyncio
import contextlib
import threading
import time

import pytest


@contextlib.contextmanager
def serving(service):
    """Run a FramedService on an ephemeral loopback port in a background loop."""
    loop = asyncio.new_event_loop()
    thread = threading.Thread(target=loop.run_forever, daemon=True)
    thread.start()
    try:
        host, port = asyncio.run_coroutine_threadsafe(service.start("127.0.0.1", 0), loop).result(5)
        yield host, port
    finally:
        asyncio.run_coroutine_threadsafe(service.close(), loop).result(5)
        loop.call_soon_threadsafe(loop.stop)
        thread.join(5)
        loop.close()


@pytest.fixture
def serve():
    return serving


class PresetRuns:
    """Runs each preset once per session to its default horizon, timing the run."""

    def __init__(self):
        self.sims = {}
        self.elapsed = {}

    def __call__(self, name):
        from tagrelay.presets import PRESETS, load_preset
        from tagrelay.simnet import Simulation

        if name not in self.sims:
            start = time.perf_counter()
            sim = Simulation(load_preset(name))
            sim.run_until(PRESETS[name][1])
            self.elapsed[name] = time.perf_counter() - start
            self.sims[name] = sim
        return self.sims[name]


@pytest.fixture(scope="session")
def preset_run():
    return PresetRuns()


_criteria: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    previous = _criteria.get(number, (title, "PASS"))[1]
    status = "PASS" if report.passed and previous == "PASS" else "FAIL"
    _criteria[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        terminalreporter.write_line(f"{status} criterion {number}: {title}")
