import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hipnav import baselines, datakit
from hipnav.config import ModelConfig, TrainConfig
from hipnav.worldsim import empty_world, make_obstacle

TINY = ModelConfig(patch_cells=2, enc_hidden=(8, 8), step_hidden=8, map_channels=2)


def one_example():
    past = np.column_stack([0.2 * np.arange(-9, 1), np.zeros(10)])
    fut = np.column_stack([0.2 * np.arange(1, 11), 0.03 * np.arange(1, 11)])
    patch = np.random.default_rng(0).uniform(0, 1, (1, 2, 2, 4)).astype(np.float32)
    return datakit.Dataset(past[None], fut[None], patch)


# ---------------------------------------------------------------- BC


def test_bc_overfits_one_example():
    ds = one_example()
    m, losses = baselines.train_bc(ds, TrainConfig(batch_size=1, epochs=1500, learning_rate=3e-3, seed=0), TINY)
    pred = baselines.bc_predict(m, ds.patches[0], ds.past[0], ds.future[0, -1])
    assert np.linalg.norm(pred - ds.future[0, 0]) < 0.01
    assert losses[-1] < losses[0]


def test_bc_zero_weights_predict_zero():
    m = baselines.init_bc(TINY, 0)
    for k in m.params:
        m.params[k][...] = 0.0
    ds = one_example()
    assert np.all(baselines.bc_predict(m, ds.patches[0], ds.past[0], (2.0, 0.0)) == 0.0)


def test_bc_deterministic(small_dataset, small_cfg):
    tc = TrainConfig(epochs=2, seed=3)
    a, la = baselines.train_bc(small_dataset, tc, small_cfg.model)
    b, lb = baselines.train_bc(small_dataset, tc, small_cfg.model)
    assert la == lb and all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_bc_empty_dataset():
    ds = datakit.Dataset(np.zeros((0, 10, 2)), np.zeros((0, 10, 2)), np.zeros((0, 2, 2, 4), np.float32))
    with pytest.raises(ValueError):
        baselines.train_bc(ds, TrainConfig(epochs=1), TINY)


def test_bc_roundtrip(tmp_path):
    m = baselines.init_bc(TINY, 4, channel_mask=(1, 1, 1, 0))
    p = tmp_path / "bc.bin"
    baselines.save_bc(p, m)
    back = baselines.load_bc(p)
    ds = one_example()
    assert back.channel_mask == m.channel_mask
    assert np.array_equal(baselines.bc_predict(back, ds.patches[0], ds.past[0], (1, 1)),
                          baselines.bc_predict(m, ds.patches[0], ds.past[0], (1, 1)))


# ---------------------------------------------------------------- A*


def test_astar_empty_world_is_straight():
    w = empty_world((20, 20))
    g = baselines.traversability_grid(w, 0.5)
    path = baselines.astar(g, (-5.25, 0.25), (4.75, 0.25))
    assert path is not None
    assert baselines.path_length(path) == pytest.approx(10.0)


def test_astar_detours_around_wall():
    w = empty_world((20, 20), obstacles=[make_obstacle("wall", (0.0, 0.0), half_extents=(0.2, 3.0))])
    g = baselines.traversability_grid(w, 0.5)
    path = baselines.astar(g, (-5.25, 0.25), (4.75, 0.25))
    assert path is not None and baselines.path_length(path) > 10.0
    assert all(w.is_free(x, y) for x, y in path)


def test_astar_unreachable():
    # goal enclosed by a ring of walls
    ring = [make_obstacle("wall", (0.0, 3.0), half_extents=(3.2, 0.2)),
            make_obstacle("wall", (0.0, -3.0), half_extents=(3.2, 0.2)),
            make_obstacle("wall", (3.0, 0.0), half_extents=(0.2, 3.2)),
            make_obstacle("wall", (-3.0, 0.0), half_extents=(0.2, 3.2))]
    g = baselines.traversability_grid(empty_world((20, 20), obstacles=ring), 0.5)
    assert baselines.astar(g, (-7.0, -7.0), (0.25, 0.25)) is None


def test_grass_is_free_for_oracle():
    w = empty_world((20, 20), obstacles=[make_obstacle("grass", (0.0, 0.0), 1.5)])
    g = baselines.traversability_grid(w, 0.5)
    assert g.free[g.cell((0.0, 0.0))] and g.free[2:-2, 2:-2].all()


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1))
def test_fine_grid_never_longer(seed):
    rng = np.random.default_rng(seed)
    obs = [make_obstacle("tree", rng.uniform(-6, 6, 2), float(rng.uniform(0.3, 1.0))) for _ in range(6)]
    w = empty_world((20, 20), obstacles=obs)
    start, goal = (-8.75, -8.75), (8.75, 8.75)
    coarse = baselines.astar(baselines.traversability_grid(w, 0.5), start, goal)
    fine = baselines.astar(baselines.traversability_grid(w, 0.1), start, goal)
    if coarse is not None:
        assert fine is not None
        # both paths start and end in the same cells up to the discretisation
        slack = math.hypot(0.5, 0.5) * 2
        assert baselines.path_length(fine) <= baselines.path_length(coarse) + slack


def test_path_length():
    assert baselines.path_length([(0, 0)]) == 0.0
    assert baselines.path_length([(0, 0), (3, 4), (3, 5)]) == 6.0
