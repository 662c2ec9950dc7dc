"""
pytest configuration for integration tests.

Integration tests run full-size presets and are skipped unless
RUN_INTEGRATION_TESTS is set. Wall-clock benchmarks additionally need
RUN_BENCHMARKS, since their outcome depends on the machine.
"""

import os

import pytest

ENABLED_VALUES = ("1", "true", "yes")


def _enabled(name):
    return os.environ.get(name, "").lower() in ENABLED_VALUES


def pytest_configure(config):
    """
    Register custom markers for pytest.
    """
    config.addinivalue_line(
        "markers",
        "integration: end-to-end test on full-size presets, enabled with RUN_INTEGRATION_TESTS=1",
    )
    config.addinivalue_line(
        "markers",
        "benchmark: wall-clock timing test, enabled with RUN_BENCHMARKS=1",
    )


@pytest.fixture(autouse=True)
def check_enabled(request):
    """
    Skip integration tests unless explicitly enabled, and benchmarks unless
    RUN_BENCHMARKS is set as well.
    """
    if request.node.get_closest_marker("benchmark"):
        if not _enabled("RUN_BENCHMARKS"):
            pytest.skip("Benchmarks not enabled. Set RUN_BENCHMARKS=1")
        return
    if not _enabled("RUN_INTEGRATION_TESTS"):
        pytest.skip("Integration tests not enabled. Set RUN_INTEGRATION_TESTS=1")
