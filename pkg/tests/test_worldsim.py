import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hipnav.config import SensorConfig, SimConfig, WorldConfig
from hipnav.fileio import SchemaError
from hipnav.worldsim import (
    BASE_APPEARANCE,
    HEIGHTS,
    Action,
    CollisionMonitor,
    RobotState,
    WorldSpec,
    detect_collision,
    empty_world,
    generate_world,
    load_world,
    make_obstacle,
    raycast_lidar,
    render_patch,
    sample_free_pose,
    save_world,
    step,
    to_local,
    to_world,
    wrap_angle,
)
from hipnav.worldsim import _coarse_blocked, _connected

DT = 1.0 / 30.0


# ---------------------------------------------------------------- generation


def test_generate_world_deterministic():
    a = generate_world(7, (40, 40), "in_distribution")
    b = generate_world(7, (40, 40), "in_distribution")
    assert a.to_json() == b.to_json()


def test_generate_world_profiles():
    ind = generate_world(7, (40, 40), "in_distribution")
    ood = generate_world(7, (40, 40), "out_of_distribution")
    assert not any(o.kind in ("wall", "novel") for o in ind.obstacles)
    assert any(o.kind in ("wall", "novel") for o in ood.obstacles)
    # ood layout extends the in-distribution one
    assert ood.obstacles[: len(ind.obstacles)] == ind.obstacles


def test_generate_world_invariants():
    w = generate_world(3, (40, 40), "out_of_distribution")
    x0, x1, y0, y1 = w.bounds
    ind_apps = {k: np.array(BASE_APPEARANCE[k]) for k in ("tree", "rock", "grass", "bush")}
    for o in w.obstacles:
        assert x0 <= o.center[0] <= x1 and y0 <= o.center[1] <= y1
        assert o.traversable == (o.kind == "grass")
        if o.kind in ("tree", "wall", "novel"):
            assert o.height >= SensorConfig().lidar_plane_height
        if o.kind == "rock":
            assert o.height < SensorConfig().lidar_plane_height
        if o.kind in ("wall", "novel"):
            gap = min(np.abs(np.array(o.appearance) - a).max() for a in ind_apps.values())
            assert gap > 0.15
    assert HEIGHTS["grass"] == HEIGHTS["bush"]
    assert BASE_APPEARANCE["grass"] != BASE_APPEARANCE["bush"]


def test_generate_world_connectivity_flood_fill():
    # rasterise the rigid obstacles and flood-fill over free coarse cells
    cfg = WorldConfig()
    w = generate_world(7, (40, 40), "in_distribution", cfg)
    rigid = [o for o in w.obstacles if not o.traversable]
    blocked = _coarse_blocked(w.extent, rigid, cfg.robot_radius, cfg.connectivity_cell)
    assert _connected(blocked)
    from scipy import ndimage

    labels, n = ndimage.label(~blocked)
    assert n == 1
    rng = np.random.default_rng(0)
    cell = cfg.connectivity_cell
    start = sample_free_pose(w, rng)
    si = (int((start.x + 20) / cell), int((start.y + 20) / cell))
    for _ in range(20):
        g = sample_free_pose(w, rng)
        gi = (int((g.x + 20) / cell), int((g.y + 20) / cell))
        if not blocked[si] and not blocked[gi]:
            assert labels[si] == labels[gi]


def test_generate_world_rejects_small_extent():
    with pytest.raises(ValueError):
        generate_world(0, (10, 40))


def test_generate_world_error_names_density():
    cfg = WorldConfig(tree_density=80.0, max_retries=5)
    with pytest.raises(RuntimeError, match="tree_density"):
        generate_world(0, (20, 20), "in_distribution", cfg)


def test_world_file_roundtrip(tmp_path):
    w = generate_world(5, (30, 30), "out_of_distribution")
    p = tmp_path / "w.json"
    save_world(p, w)
    assert load_world(p) == w
    bad = tmp_path / "bad.json"
    bad.write_text(p.read_text().replace('"version": 1', '"version": 99'))
    with pytest.raises(SchemaError):
        load_world(bad)


# ---------------------------------------------------------------- dynamics


def test_step_straight():
    s = step(empty_world(), RobotState(0, 0, 0), Action(1.0, 0.0), DT)
    assert s.x == pytest.approx(1 / 30) and s.y == 0 and s.heading == 0


def test_step_blocked_by_tree():
    tree = make_obstacle("tree", (1.0, 0.0), 0.5)
    w = empty_world(obstacles=[tree])
    # robot disk (r=0.3) touches the tree surface at x=0.5
    s0 = RobotState(0.2, 0.0, 0.0)
    s1 = step(w, s0, Action(1.0, 0.5), DT)
    assert (s1.x, s1.y) == (s0.x, s0.y)
    assert s1.heading == pytest.approx(0.5 * DT)


def test_step_grass_slowdown():
    grass = make_obstacle("grass", (0.0, 0.0), 1.0)
    w = empty_world(grass_slowdown=0.5, obstacles=[grass])
    s = step(w, RobotState(0, 0, 0), Action(1.0, 0.0), DT)
    assert s.x == pytest.approx(1 / 60)


def test_step_fence_blocks():
    # the geofence constrains the robot centre
    w = empty_world((20, 20))
    s0 = RobotState(9.99, 0.0, 0.0)
    assert step(w, s0, Action(1.0, 0.0), DT).x == s0.x


def test_step_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        step(empty_world(), RobotState(0, 0, 0), Action(1, 0), 0.0)


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-math.pi, math.pi),
       st.floats(-20, 20))
def test_wrap_and_frames(x, y, h, a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    p = np.array([[1.5, -2.0], [0.0, 3.0]])
    back = to_local(to_world(p, x, y, h), x, y, h)
    np.testing.assert_allclose(back, p, atol=1e-9)


@settings(max_examples=20)
@given(st.integers(0, 2**31 - 1))
def test_grass_never_blocks(seed):
    rng = np.random.default_rng(seed)
    grass = [make_obstacle("grass", rng.uniform(-5, 5, 2), rng.uniform(0.8, 1.6)) for _ in range(4)]
    w_grass = empty_world(grass_slowdown=1.0, obstacles=grass)
    w_empty = empty_world(grass_slowdown=1.0)
    s1 = s2 = RobotState(0.0, 0.0, rng.uniform(-math.pi, math.pi))
    for _ in range(120):
        a = Action(float(rng.choice([0.0, 0.5, 1.0])), float(rng.choice([-1.0, 0.0, 1.0])))
        s1, s2 = step(w_grass, s1, a, DT), step(w_empty, s2, a, DT)
    assert (s1.x, s1.y, s1.heading) == (s2.x, s2.y, s2.heading)


@settings(max_examples=10)
@given(st.integers(0, 2**31 - 1))
def test_blocking_is_conservative(seed):
    w = generate_world(1, (20, 20))
    rng = np.random.default_rng(seed)
    s = sample_free_pose(w, rng)
    for _ in range(600):
        s = step(w, s, Action(1.0, float(rng.choice([-1.0, 0.0, 1.0]))), DT)
        for o in w.obstacles:
            if o.traversable:
                continue
            if o.is_rect:
                inside = abs(s.x - o.center[0]) < o.half_extents[0] and abs(s.y - o.center[1]) < o.half_extents[1]
            else:
                inside = math.hypot(s.x - o.center[0], s.y - o.center[1]) < o.radius
            assert not inside


# ---------------------------------------------------------------- sensors


def test_lidar_single_tree():
    w = empty_world(obstacles=[make_obstacle("tree", (3.0, 0.0), 0.5)])
    pts = raycast_lidar(w, RobotState(0, 0, 0))
    assert len(pts) > 0
    ahead = pts[np.argmin(np.abs(np.arctan2(pts[:, 1], pts[:, 0])))]
    np.testing.assert_allclose(ahead, (2.5, 0.0), atol=1e-9)


def test_lidar_misses_rock():
    w = empty_world(obstacles=[make_obstacle("rock", (2.0, 0.0), 0.4)])
    assert len(raycast_lidar(w, RobotState(0, 0, 0))) == 0


def test_lidar_grass_bush_mirror():
    w = empty_world(obstacles=[make_obstacle("grass", (0.0, 3.0), 0.7), make_obstacle("bush", (0.0, -3.0), 0.7)])
    pts = raycast_lidar(w, RobotState(0, 0, 0))
    up, down = pts[pts[:, 1] > 0], pts[pts[:, 1] < 0]
    assert len(up) == len(down) > 0
    np.testing.assert_allclose(np.sort(np.hypot(*up.T)), np.sort(np.hypot(*down.T)), atol=1e-9)


def test_lidar_wall():
    w = empty_world(obstacles=[make_obstacle("wall", (4.0, 0.0), half_extents=(0.15, 2.0))])
    pts = raycast_lidar(w, RobotState(0, 0, 0))
    ahead = pts[np.argmin(np.abs(np.arctan2(pts[:, 1], pts[:, 0])))]
    np.testing.assert_allclose(ahead, (3.85, 0.0), atol=1e-9)


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1))
def test_ray_correctness_dense_oracle(seed):
    w = generate_world(2, (20, 20), "out_of_distribution")
    rng = np.random.default_rng(seed)
    pose = sample_free_pose(w, rng)
    cfg = SensorConfig(n_rays=72)
    pts = raycast_lidar(w, pose, cfg)
    tall = w.tall(cfg.lidar_plane_height)
    world_pts = to_world(pts, pose.x, pose.y, pose.heading)
    for p in world_pts:
        d = math.hypot(p[0] - pose.x, p[1] - pose.y)
        assert d <= cfg.max_range + 1e-9
        # the hit point is on a tall obstacle boundary
        assert tall.clearance(p[0], p[1]) < 1e-6
        # dense samples on the open segment are all outside tall obstacles
        s = np.linspace(0.0, 1.0, 400)[1:-1, None]
        seg = np.array([pose.x, pose.y]) + s * (p - [pose.x, pose.y])
        clear = tall.clearance_many(seg[:, 0], seg[:, 1])
        assert np.all(clear[:-1] > 0.0)


def test_patch_empty_world():
    cfg = SensorConfig()
    p = render_patch(empty_world(), RobotState(0, 0, 0), 3, cfg)
    assert p.shape == (100, 100, 4)
    from hipnav.worldsim import GROUND_APPEARANCE

    assert np.all(np.abs(p[..., :3] - GROUND_APPEARANCE) <= cfg.patch_noise + 1e-12)
    assert np.all(p[..., 3] <= cfg.patch_noise + 1e-12)
    assert p.min() >= 0 and p.max() <= 1


def test_patch_bush_rasterised():
    cfg = SensorConfig(patch_noise=0.0)
    w = empty_world(obstacles=[make_obstacle("bush", (5.0, 0.0), 0.6)])
    p = render_patch(w, RobotState(0, 0, 0), 0, cfg)
    # cell centre nearest local (5, 0): row = 5/0.1 - 0.5, col = 5/0.1 - 0.5
    np.testing.assert_allclose(p[49, 49, :3], BASE_APPEARANCE["bush"])
    assert p[49, 49, 3] == pytest.approx(0.5 / cfg.max_height)


def test_patch_deterministic_and_seeded():
    w = generate_world(4, (30, 30))
    pose = RobotState(1.0, 2.0, 0.3)
    a, b = render_patch(w, pose, 9), render_patch(w, pose, 9)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, render_patch(w, pose, 10))


def test_patch_outside_fence_is_ground():
    cfg = SensorConfig(patch_noise=0.0)
    w = empty_world((20, 20))
    p = render_patch(w, RobotState(9.0, 0.0, 0.0), 0, cfg)
    assert np.all(p[..., 3] == 0.0)


# ---------------------------------------------------------------- collisions


def _hist(times, xy, v=1.0):
    return np.column_stack([times, xy, np.full(len(times), v)])


def test_detect_stuck():
    t = np.arange(0, 4.2 + 1e-9, DT)
    assert detect_collision(_hist(t, np.zeros((len(t), 2)))).kind == "stuck"


def test_detect_stuck_needs_command():
    t = np.arange(0, 4.2 + 1e-9, DT)
    h = _hist(t, np.zeros((len(t), 2)), v=0.0)
    ev = detect_collision(h)
    assert ev is None or ev.kind != "stuck"


def test_detect_trapped_circle():
    t = np.arange(0, 10.0 + 1e-9, DT)
    # circle of radius 1.2 m: net displacement at most 2.4 m
    ang = np.pi * t / 10.0
    xy = np.column_stack([1.2 * np.sin(ang), 1.2 - 1.2 * np.cos(ang)])
    assert np.hypot(*(xy[-1] - xy[0])) == pytest.approx(2.4)
    assert detect_collision(_hist(t, xy)).kind == "trapped"


def test_detect_free_motion():
    t = np.arange(0, 10.0 + 1e-9, DT)
    xy = np.column_stack([t, np.zeros_like(t)])
    assert detect_collision(_hist(t, xy)) is None


def test_stuck_precedence():
    t = np.arange(0, 10.0 + 1e-9, DT)
    assert detect_collision(_hist(t, np.zeros((len(t), 2)))).kind == "stuck"


def test_monitor_matches_batch_and_fires_once():
    sim = SimConfig()
    t = np.arange(0, 12.0, DT)
    xy = np.column_stack([np.minimum(t, 1.0), np.zeros_like(t)])
    mon = CollisionMonitor(sim, capacity=64)
    events = []
    for i in range(len(t)):
        ev = mon.update(t[i], xy[i, 0], xy[i, 1], 1.0)
        if ev is not None:
            events.append((i, ev))
            assert detect_collision(_hist(t[: i + 1], xy[: i + 1]), sim).kind == ev.kind
    assert len(events) == 1


def test_world_spec_equality_ignores_meta():
    a = empty_world()
    b = WorldSpec(a.seed, a.extent, a.obstacles, a.grass_slowdown, meta={"x": 1})
    assert a == b
