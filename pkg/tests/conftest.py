import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hipnav import datakit, imitative
from hipnav.config import Config
from hipnav.worldsim import generate_world

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def small_config() -> Config:
    """Tiny but complete configuration for end-to-end tests."""
    cfg = Config()
    cfg.data.n_worlds = 1
    cfg.data.steps_per_world = 3000
    cfg.data.library_size = 20
    cfg.data.kmeans_iters = 20
    cfg.train.epochs = 2
    cfg.train.mirror = False
    cfg.model.enc_hidden = (16, 8)
    cfg.model.step_hidden = 8
    cfg.model.map_channels = 2
    cfg.eval.n_episodes = 3
    cfg.eval.n_worlds = 1
    cfg.eval.timeout = 20.0
    cfg.eval.min_goal_dist = 10.0
    cfg.eval.max_goal_dist = 12.0
    return cfg


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_world(small_cfg):
    return generate_world(11, small_cfg.world.extent, "in_distribution", small_cfg.world)


@pytest.fixture(scope="session")
def small_log(small_world, small_cfg):
    return datakit.collect(small_world, small_cfg.data.steps_per_world, 5, small_cfg.data, small_cfg.sim)


@pytest.fixture(scope="session")
def small_dataset(small_log, small_cfg):
    c = small_cfg
    return datakit.make_dataset(small_log, c.data.f_traj, c.data, c.sensor, c.sim, c.model.patch_cells)


@pytest.fixture(scope="session")
def small_model(small_dataset, small_cfg):
    model, _ = imitative.train(small_dataset, small_cfg.train, small_cfg.model)
    return model


@pytest.fixture(scope="session")
def small_library(small_dataset, small_cfg):
    return datakit.build_library(small_dataset, small_cfg.data.library_size, 3, small_cfg.data.kmeans_iters)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
