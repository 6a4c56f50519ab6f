from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

_acceptance_key = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_acceptance_key] = {}


@pytest.fixture
def acceptance(request):
    """``acceptance(name, passed, detail)`` records one criterion line for the summary."""
    lines = request.config.stash[_acceptance_key]

    def record(name: str, passed: bool, detail: str = "") -> None:
        lines[name] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_acceptance_key, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(lines, key=lambda s: int(s[1:])):
        passed, detail = lines[name]
        terminalreporter.write_line(f"{name} {'PASS' if passed else 'FAIL'}  {detail}".rstrip())
