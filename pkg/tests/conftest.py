import time
from contextlib import contextmanager

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance line: number, verdict, runtime, details.

    Usage::

        with criterion(3, "gradient checks", budget_s=120) as notes:
            notes.append("vae max rel 1e-7")
            assert ...
    """
    results = request.config.stash[_CRITERIA]

    @contextmanager
    def run(number: int, title: str, budget_s: float, extra_seconds: float = 0.0):
        notes: list[str] = []
        t0 = time.perf_counter()
        verdict = "FAIL"
        try:
            yield notes
            elapsed = time.perf_counter() - t0 + extra_seconds
            notes.append(f"runtime {elapsed:.1f}s (budget {budget_s:.0f}s)")
            assert elapsed < budget_s, f"criterion {number} exceeded its {budget_s}s budget"
            verdict = "PASS"
        except BaseException as exc:
            notes.append(f"failed: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}")
            raise
        finally:
            line = f"criterion {number} [{verdict}] {title}: " + "; ".join(notes)
            results[number] = line
            print(line)

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_CRITERIA]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
