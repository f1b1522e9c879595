import numpy as np
import pytest

from digrl.scenegen import Tray, spawn_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tray():
    return Tray()


@pytest.fixture(scope="session")
def small_scene():
    """A settled scene with 8 to 12 objects, shared read-only across tests."""
    return spawn_scene(seed=7, count_range=(8, 12))
