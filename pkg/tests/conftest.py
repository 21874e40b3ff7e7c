import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from coopgait import fixtures  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

DATA = Path(fixtures.data_path("planar_walker.yaml")).parent


@pytest.fixture(scope="session")
def walker():
    return fixtures.walker_model()


@pytest.fixture(scope="session")
def graph():
    return fixtures.walker_graph()


@pytest.fixture(scope="session")
def outputs():
    return fixtures.walker_outputs()


@pytest.fixture(scope="session")
def gait():
    return fixtures.walker_gait()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_walker_state(model, rng, scale=0.2):
    """A generic configuration near a standing pose, random velocities."""
    q = np.array([0.1, 0.85, 0.0, 0.25, -0.03, -0.25, -0.03])
    q = q + scale * rng.uniform(-1, 1, model.n) * np.array([1, 0.2, 0.5, 1, 0.1, 1, 0.1])
    v = rng.normal(size=model.n)
    return q, v
