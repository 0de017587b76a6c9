import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(number, title, checks, detail=""):
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        _ACCEPTANCE.append((number, title, ok, detail, failed))
        line = f"[acceptance {number:>2}] {'PASS' if ok else 'FAIL'}  {title}  {detail}"
        if failed:
            line += f"  failed: {', '.join(failed)}"
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail, failed in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        line = f"{number:>2}. {'PASS' if ok else 'FAIL'}  {title}  {detail}"
        if failed:
            line += f"  failed: {', '.join(failed)}"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
