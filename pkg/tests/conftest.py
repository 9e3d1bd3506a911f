import numpy as np
import pytest

from certmon.envs import ObstacleTrack, make_drone2d, make_ship2d


def tiny_drone_env(**overrides):
    """Two-obstacle drone with a short horizon for fast tests."""
    kw = dict(
        obstacles=[
            ObstacleTrack([(5.0, 3.0), (7.0, 3.0)], period=6.0, radius=0.4),
            ObstacleTrack([(5.0, 6.0), (5.0, 4.5)], period=8.0, radius=0.4),
        ],
        k_nearest=2,
        horizon_steps=40,
    )
    kw.update(overrides)
    return make_drone2d(**kw)


def tiny_ship_env(**overrides):
    kw = dict(
        obstacles=[
            ObstacleTrack([(5.0, 3.0), (7.0, 3.0)], period=6.0, radius=0.35),
            ObstacleTrack([(5.0, 6.0), (5.0, 4.5)], period=8.0, radius=0.35),
        ],
        k_nearest=2,
        horizon_steps=40,
    )
    kw.update(overrides)
    return make_ship2d(**kw)


@pytest.fixture
def tiny_drone():
    return tiny_drone_env()


@pytest.fixture
def tiny_ship():
    return tiny_ship_env()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
