import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rcm.likelihood import StudyData

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES: dict[int, str] = {}


def random_spd(rng, p, ridge=None):
    a = rng.standard_normal((p, p))
    return a @ a.T + (p if ridge is None else ridge) * np.eye(p)


def random_studies(rng, p, k, n_lo=3, n_hi=12):
    """Raw observation matrices and their StudyData."""
    raw = [rng.standard_normal((int(rng.integers(n_lo, n_hi + 1)), p)) @ rng.standard_normal((p, p)) for _ in range(k)]
    return raw, [StudyData.from_observations(x) for x in raw]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
