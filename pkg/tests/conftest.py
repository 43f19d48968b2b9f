import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.spatial.transform import Rotation

from pcrpolicy.geometry import RigidTransform

settings.register_profile(
    "pcr", max_examples=100, deadline=None, derandomize=True, database=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("pcr")

# Filled by tests/test_acceptance.py, printed once at the end of the session.
ACCEPTANCE_LINES = {}


def random_transform(rng: np.random.Generator, max_translation: float = 0.5) -> RigidTransform:
    """Haar rotation and a translation drawn uniformly from a ball."""
    r = Rotation.random(random_state=rng).as_matrix()
    d = rng.normal(size=3)
    d *= max_translation * rng.uniform() ** (1 / 3) / np.linalg.norm(d)
    return RigidTransform(r, d)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[name])
