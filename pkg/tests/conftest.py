import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from recon4d.geometry import Grid4D, RigidTransform

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid():
    return Grid4D((12, 10, 6, 4), (2.0, 2.0, 3.0), 2.0)


def random_transform(rng, max_deg=30.0, max_mm=10.0, center=(0.0, 0.0, 0.0)):
    params = np.concatenate([rng.uniform(-max_deg, max_deg, 3), rng.uniform(-max_mm, max_mm, 3)])
    return RigidTransform.from_params(params, center=center)


# one line per acceptance criterion, printed after the test run
ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[number] = f"acceptance {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
