"""Shared fixtures: a small simulated scene reused by io/cli/pipeline tests."""

import numpy as np
import pytest

from radargrid.simworld import SceneParams, WorldParams, gen_scene


@pytest.fixture(scope="session")
def tiny_scene():
    """A fast 12-step scene with the default sensor rig."""
    params = SceneParams(n_steps=12, world=WorldParams(n_obstacles=4))
    return gen_scene(11, params)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
