"""Shared fixtures and the acceptance-criteria result banner."""

from __future__ import annotations

import time
from contextlib import contextmanager
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
CONFIG_DIR = ROOT / "configs"

_RESULTS: list[tuple[int, str, float, str]] = []


@contextmanager
def criterion(num: int, desc: str, budget_s: float | None = None):
    """Record one acceptance criterion outcome; enforce its runtime budget."""
    t0 = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - t0
        if budget_s is not None and elapsed > budget_s:
            raise AssertionError(f"runtime budget exceeded: {elapsed:.1f}s > {budget_s:.0f}s")
    except BaseException:
        _RESULTS.append((num, "FAIL", time.perf_counter() - t0, desc))
        raise
    _RESULTS.append((num, "PASS", elapsed, desc))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, verdict, elapsed, desc in sorted(_RESULTS):
        terminalreporter.write_line(f"criterion {num:2d}: {verdict}  ({elapsed:6.2f}s)  {desc}")


@pytest.fixture(scope="session")
def config_dir() -> Path:
    return CONFIG_DIR
