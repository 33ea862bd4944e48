"""Flat 2D off-road world: procedural obstacles, unicycle kinematics, planar
LiDAR, an egocentric appearance+height patch and collision heuristics.

The geofence is the rectangle centred on the origin with side lengths
``extent``. Angles are radians, lengths metres.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import SensorConfig, SimConfig, WorldConfig

WORLD_SCHEMA_VERSION = 1

KINDS = ("tree", "rock", "grass", "bush", "wall", "novel")
PROFILES = ("in_distribution", "out_of_distribution")
RIGID_KINDS = ("tree", "rock", "bush", "wall", "novel")

HEIGHTS = {"tree": 2.0, "rock": 0.2, "grass": 0.5, "bush": 0.5, "wall": 2.0, "novel": 1.2}
RADII = {
    "tree": (0.3, 0.6),
    "rock": (0.25, 0.45),
    "grass": (0.8, 1.6),
    "bush": (0.4, 0.8),
    "novel": (0.4, 0.8),
}
WALL_HALF_LONG = (1.0, 2.0)
WALL_HALF_SHORT = 0.15

GROUND_APPEARANCE = (0.45, 0.38, 0.28)
# Rocks are tinted close to bare ground: colour alone barely separates them.
BASE_APPEARANCE = {
    "tree": (0.30, 0.20, 0.10),
    "rock": (0.50, 0.42, 0.32),
    "grass": (0.60, 0.78, 0.32),
    "bush": (0.14, 0.40, 0.12),
    "wall": (0.85, 0.15, 0.75),
    "novel": (0.15, 0.35, 0.90),
}
APPEARANCE_JITTER = {"rock": 0.04}
DEFAULT_JITTER = 0.03

# discrete action grid used by the random policies
LINEAR_CHOICES = (0.0, 0.5, 1.0)
ANGULAR_CHOICES = (-1.0, -0.5, 0.0, 0.5, 1.0)


class WorldGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Obstacle:
    kind: str
    center: tuple[float, float]
    radius: float
    height: float
    appearance: tuple[float, float, float]
    traversable: bool
    half_extents: tuple[float, float] | None = None  # walls only

    @property
    def is_rect(self) -> bool:
        return self.half_extents is not None

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "center": list(self.center),
            "radius": self.radius,
            "height": self.height,
            "appearance": list(self.appearance),
            "traversable": self.traversable,
        }
        if self.half_extents is not None:
            d["half_extents"] = list(self.half_extents)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Obstacle":
        he = d.get("half_extents")
        return cls(
            kind=d["kind"],
            center=(float(d["center"][0]), float(d["center"][1])),
            radius=float(d["radius"]),
            height=float(d["height"]),
            appearance=tuple(float(a) for a in d["appearance"]),
            traversable=bool(d["traversable"]),
            half_extents=None if he is None else (float(he[0]), float(he[1])),
        )


class _Shapes:
    """Column arrays for a subset of obstacles, for vectorised geometry."""

    def __init__(self, obstacles):
        circ = [o for o in obstacles if not o.is_rect]
        rect = [o for o in obstacles if o.is_rect]
        self.circ = np.array([[o.center[0], o.center[1], o.radius] for o in circ]).reshape(-1, 3)
        self.rect = np.array(
            [[o.center[0], o.center[1], o.half_extents[0], o.half_extents[1]] for o in rect]
        ).reshape(-1, 4)

    def __len__(self):
        return len(self.circ) + len(self.rect)

    def clearance(self, x, y):
        """Signed-ish distance from (x, y) to the nearest shape boundary (0 inside)."""
        d = np.inf
        if len(self.circ):
            dc = np.hypot(self.circ[:, 0] - x, self.circ[:, 1] - y) - self.circ[:, 2]
            d = min(d, float(dc.min()))
        if len(self.rect):
            dx = np.maximum(np.abs(x - self.rect[:, 0]) - self.rect[:, 2], 0.0)
            dy = np.maximum(np.abs(y - self.rect[:, 1]) - self.rect[:, 3], 0.0)
            d = min(d, float(np.hypot(dx, dy).min()))
        return max(d, 0.0) if np.isfinite(d) else d

    def clearance_many(self, x, y, chunk: int = 8192) -> np.ndarray:
        """Elementwise ``clearance`` for arrays of query points."""
        x = np.asarray(x, dtype=float)
        y = np.broadcast_to(np.asarray(y, dtype=float), x.shape)
        fx, fy = x.ravel(), y.ravel()
        out = np.full(fx.shape, np.inf)
        for s in range(0, len(fx), chunk):
            px, py = fx[s:s + chunk, None], fy[s:s + chunk, None]
            d = out[s:s + chunk]
            if len(self.circ):
                c = self.circ
                d = np.minimum(d, (np.hypot(c[:, 0] - px, c[:, 1] - py) - c[:, 2]).min(axis=1))
            if len(self.rect):
                r = self.rect
                dx = np.maximum(np.abs(px - r[:, 0]) - r[:, 2], 0.0)
                dy = np.maximum(np.abs(py - r[:, 1]) - r[:, 3], 0.0)
                d = np.minimum(d, np.hypot(dx, dy).min(axis=1))
            out[s:s + chunk] = d
        return np.maximum(out, 0.0).reshape(x.shape)

    def contains(self, x, y):
        if len(self.circ):
            if np.any(np.hypot(self.circ[:, 0] - x, self.circ[:, 1] - y) <= self.circ[:, 2]):
                return True
        if len(self.rect):
            inside = (np.abs(x - self.rect[:, 0]) <= self.rect[:, 2]) & (
                np.abs(y - self.rect[:, 1]) <= self.rect[:, 3]
            )
            if np.any(inside):
                return True
        return False


@dataclass(frozen=True)
class WorldSpec:
    seed: int
    extent: tuple[float, float]
    obstacles: tuple[Obstacle, ...]
    grass_slowdown: float = 0.7
    profile: str = "in_distribution"
    robot_radius: float = 0.3
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        hx, hy = self.extent[0] / 2, self.extent[1] / 2
        return -hx, hx, -hy, hy

    def inside_fence(self, x, y) -> bool:
        x0, x1, y0, y1 = self.bounds
        return x0 <= x <= x1 and y0 <= y <= y1

    @cached_property
    def rigid(self) -> _Shapes:
        return _Shapes([o for o in self.obstacles if not o.traversable])

    @cached_property
    def grass(self) -> _Shapes:
        return _Shapes([o for o in self.obstacles if o.traversable])

    def tall(self, plane_height: float) -> _Shapes:
        cache = self.__dict__.setdefault("_tall_cache", {})
        if plane_height not in cache:
            cache[plane_height] = _Shapes([o for o in self.obstacles if o.height >= plane_height])
        return cache[plane_height]

    def is_free(self, x, y, margin: float = 0.0, avoid_grass: bool = False) -> bool:
        """True when a robot disk at (x, y) with extra margin touches nothing rigid."""
        x0, x1, y0, y1 = self.bounds
        r = self.robot_radius + margin
        if not (x0 + r <= x <= x1 - r and y0 + r <= y <= y1 - r):
            return False
        if len(self.rigid) and self.rigid.clearance(x, y) < r:
            return False
        if avoid_grass and len(self.grass) and self.grass.clearance(x, y) < r:
            return False
        return True

    def to_dict(self) -> dict:
        return {
            "schema": "hipnav.world",
            "version": WORLD_SCHEMA_VERSION,
            "seed": self.seed,
            "extent": list(self.extent),
            "grass_slowdown": self.grass_slowdown,
            "profile": self.profile,
            "robot_radius": self.robot_radius,
            "obstacles": [o.to_dict() for o in self.obstacles],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        if d.get("schema") != "hipnav.world":
            raise ValueError("not a world file")
        if d.get("version") != WORLD_SCHEMA_VERSION:
            raise ValueError(f"unsupported world schema version {d.get('version')}")
        return cls(
            seed=int(d["seed"]),
            extent=(float(d["extent"][0]), float(d["extent"][1])),
            obstacles=tuple(Obstacle.from_dict(o) for o in d["obstacles"]),
            grass_slowdown=float(d["grass_slowdown"]),
            profile=d["profile"],
            robot_radius=float(d["robot_radius"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "WorldSpec":
        return cls.from_dict(json.loads(text))


def save_world(path, world: WorldSpec) -> None:
    Path(path).write_text(world.to_json() + "\n")


def load_world(path) -> WorldSpec:
    from .fileio import SchemaError

    try:
        return WorldSpec.from_json(Path(path).read_text())
    except (ValueError, KeyError) as e:
        raise SchemaError(f"{path}: {e}") from None


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    heading: float
    time: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Action:
    linear: float
    angular: float


@dataclass
class Observation:
    position: np.ndarray
    heading: float
    pointcloud: np.ndarray  # (N, 2) local frame
    patch: np.ndarray  # (H_i, W_i, 4)
    past_positions: np.ndarray  # (H_past, 2) local frame, last row is the origin


@dataclass(frozen=True)
class CollisionEvent:
    kind: str  # "stuck" | "trapped"
    time: float


def wrap_angle(a: float) -> float:
    """Map to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


def to_local(points, x, y, heading):
    c, s = math.cos(heading), math.sin(heading)
    p = np.asarray(points, dtype=float) - (x, y)
    return np.stack([c * p[..., 0] + s * p[..., 1], -s * p[..., 0] + c * p[..., 1]], axis=-1)


def to_world(points, x, y, heading):
    c, s = math.cos(heading), math.sin(heading)
    p = np.asarray(points, dtype=float)
    return np.stack([c * p[..., 0] - s * p[..., 1] + x, s * p[..., 0] + c * p[..., 1] + y], axis=-1)


# ---------------------------------------------------------------- generation


def _appearance(kind, rng):
    base = np.array(BASE_APPEARANCE[kind])
    j = APPEARANCE_JITTER.get(kind, DEFAULT_JITTER)
    return tuple(float(v) for v in np.clip(base + rng.uniform(-j, j, 3), 0.0, 1.0))


def _coarse_blocked(extent, obstacles, robot_radius, cell):
    nx, ny = int(round(extent[0] / cell)), int(round(extent[1] / cell))
    xs = -extent[0] / 2 + (np.arange(nx) + 0.5) * cell
    ys = -extent[1] / 2 + (np.arange(ny) + 0.5) * cell
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    blocked = np.zeros((nx, ny), dtype=bool)
    for o in obstacles:
        if o.traversable:
            continue
        blocked |= _shape_mask(o, gx, gy, robot_radius)
    return blocked


def _shape_mask(o, gx, gy, inflate=0.0):
    if o.is_rect:
        dx = np.maximum(np.abs(gx - o.center[0]) - o.half_extents[0], 0.0)
        dy = np.maximum(np.abs(gy - o.center[1]) - o.half_extents[1], 0.0)
        return dx * dx + dy * dy <= inflate * inflate if inflate > 0 else (dx == 0) & (dy == 0)
    r = o.radius + inflate
    return (gx - o.center[0]) ** 2 + (gy - o.center[1]) ** 2 <= r * r


def _stamp(blocked, o, extent, robot_radius, cell):
    """Rasterise one obstacle into the coarse grid, touching only its bounding box."""
    reach = (max(o.half_extents) if o.is_rect else o.radius) + robot_radius
    nx, ny = blocked.shape
    i0 = max(int((o.center[0] - reach + extent[0] / 2) / cell), 0)
    i1 = min(int((o.center[0] + reach + extent[0] / 2) / cell) + 1, nx)
    j0 = max(int((o.center[1] - reach + extent[1] / 2) / cell), 0)
    j1 = min(int((o.center[1] + reach + extent[1] / 2) / cell) + 1, ny)
    if i0 >= i1 or j0 >= j1:
        return blocked
    xs = -extent[0] / 2 + (np.arange(i0, i1) + 0.5) * cell
    ys = -extent[1] / 2 + (np.arange(j0, j1) + 0.5) * cell
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    out = blocked.copy()
    out[i0:i1, j0:j1] |= _shape_mask(o, gx, gy, robot_radius)
    return out


def _connected(blocked):
    labels, n = ndimage.label(~blocked)
    return n <= 1


def _gap(o, rigid: _Shapes):
    """Smallest boundary-to-boundary gap between o and already placed rigid shapes."""
    g = np.inf
    if o.is_rect:
        hx, hy = o.half_extents
        if len(rigid.circ):
            c = rigid.circ
            dx = np.maximum(np.abs(c[:, 0] - o.center[0]) - hx, 0.0)
            dy = np.maximum(np.abs(c[:, 1] - o.center[1]) - hy, 0.0)
            g = min(g, float((np.hypot(dx, dy) - c[:, 2]).min()))
        if len(rigid.rect):
            r = rigid.rect
            dx = np.maximum(np.abs(r[:, 0] - o.center[0]) - hx - r[:, 2], 0.0)
            dy = np.maximum(np.abs(r[:, 1] - o.center[1]) - hy - r[:, 3], 0.0)
            g = min(g, float(np.hypot(dx, dy).min()))
        return g
    d = rigid.clearance(o.center[0], o.center[1]) if len(rigid) else np.inf
    return d - o.radius


def generate_world(seed: int, extent=(40.0, 40.0), profile: str = "in_distribution",
                   cfg: WorldConfig | None = None) -> WorldSpec:
    """Scatter obstacles by seeded rejection sampling.

    Rigid obstacles keep a free gap of at least ``cfg.clearance`` between
    each other and every placement must leave the free cells of a coarse
    grid (rigid obstacles inflated by the robot radius) in one connected
    component. The out-of-distribution profile reuses the in-distribution
    layout for the same seed and adds walls and novel obstacles on top.
    """
    cfg = cfg or WorldConfig()
    extent = (float(extent[0]), float(extent[1]))
    if min(extent) < 20.0:
        raise ValueError("extent must be at least 20 x 20 m")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    area = extent[0] * extent[1] / 100.0
    plan = [
        ("grass", cfg.grass_density),
        ("tree", cfg.tree_density),
        ("rock", cfg.rock_density),
        ("bush", cfg.bush_density),
    ]
    extra = [("wall", cfg.wall_density), ("novel", cfg.novel_density)]
    r_robot = cfg.robot_radius
    cell = cfg.connectivity_cell

    obstacles: list[Obstacle] = []
    blocked = _coarse_blocked(extent, [], r_robot, cell)
    rigid = _Shapes([])

    def place(kind, density, rng):
        nonlocal blocked, rigid
        count = int(round(density * area))
        hx, hy = extent[0] / 2, extent[1] / 2
        for _ in range(count):
            for _attempt in range(cfg.max_retries):
                o = _sample_obstacle(kind, rng, hx, hy)
                if o.traversable:
                    obstacles.append(o)
                    break
                if _gap(o, rigid) < cfg.clearance:
                    continue
                nb = _stamp(blocked, o, extent, r_robot, cell)
                if not _connected(nb):
                    continue
                blocked = nb
                obstacles.append(o)
                rigid = _Shapes([ob for ob in obstacles if not ob.traversable])
                break
            else:
                raise WorldGenerationError(
                    f"could not place {kind} after {cfg.max_retries} retries; "
                    f"lower {kind}_density (currently {density})"
                )

    base_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    for kind, density in plan:
        place(kind, density, base_rng)
    if profile == "out_of_distribution":
        ood_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
        for kind, density in extra:
            place(kind, density, ood_rng)

    return WorldSpec(
        seed=int(seed),
        extent=extent,
        obstacles=tuple(obstacles),
        grass_slowdown=cfg.grass_slowdown,
        profile=profile,
        robot_radius=r_robot,
    )


def _sample_obstacle(kind, rng, hx, hy):
    if kind == "wall":
        long = rng.uniform(*WALL_HALF_LONG)
        he = (long, WALL_HALF_SHORT) if rng.random() < 0.5 else (WALL_HALF_SHORT, long)
        cx = rng.uniform(-hx + he[0], hx - he[0])
        cy = rng.uniform(-hy + he[1], hy - he[1])
        return Obstacle("wall", (float(cx), float(cy)), float(max(he)), HEIGHTS["wall"],
                        _appearance("wall", rng), False, (float(he[0]), float(he[1])))
    r = rng.uniform(*RADII[kind])
    cx = rng.uniform(-hx + r, hx - r)
    cy = rng.uniform(-hy + r, hy - r)
    return Obstacle(kind, (float(cx), float(cy)), float(r), HEIGHTS[kind],
                    _appearance(kind, rng), kind == "grass")


def empty_world(extent=(40.0, 40.0), seed: int = 0, grass_slowdown: float = 0.7,
                obstacles=()) -> WorldSpec:
    return WorldSpec(seed=seed, extent=tuple(float(e) for e in extent), obstacles=tuple(obstacles),
                     grass_slowdown=grass_slowdown)


def make_obstacle(kind, center, radius=0.5, half_extents=None, appearance=None) -> Obstacle:
    app = tuple(BASE_APPEARANCE[kind]) if appearance is None else tuple(appearance)
    if kind == "wall" and half_extents is None:
        half_extents = (radius, WALL_HALF_SHORT)
    return Obstacle(kind, (float(center[0]), float(center[1])),
                    float(max(half_extents) if half_extents else radius),
                    HEIGHTS[kind], app, kind == "grass",
                    None if half_extents is None else tuple(float(h) for h in half_extents))


def sample_free_pose(world: WorldSpec, rng, margin: float = 0.5, max_tries: int = 10000):
    x0, x1, y0, y1 = world.bounds
    for _ in range(max_tries):
        x = rng.uniform(x0, x1)
        y = rng.uniform(y0, y1)
        if world.is_free(x, y, margin=margin, avoid_grass=True):
            return RobotState(float(x), float(y), float(rng.uniform(-math.pi, math.pi)))
    raise WorldGenerationError("no free pose found")


# ---------------------------------------------------------------- dynamics


def in_grass(world: WorldSpec, x, y) -> bool:
    return len(world.grass) > 0 and world.grass.contains(x, y)


def blocked(world: WorldSpec, x, y) -> bool:
    if not world.inside_fence(x, y):
        return True
    rigid = world.rigid
    return len(rigid) > 0 and rigid.clearance(x, y) < world.robot_radius


def step(world: WorldSpec, state: RobotState, action: Action, dt: float) -> RobotState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    v = action.linear
    if v != 0.0 and in_grass(world, state.x, state.y):
        v *= world.grass_slowdown
    nx = state.x + v * math.cos(state.heading) * dt
    ny = state.y + v * math.sin(state.heading) * dt
    if v != 0.0 and blocked(world, nx, ny):
        nx, ny = state.x, state.y
    return RobotState(nx, ny, wrap_angle(state.heading + action.angular * dt), state.time + dt)


# ---------------------------------------------------------------- sensors


def raycast_lidar(world: WorldSpec, pose: RobotState, cfg: SensorConfig | None = None) -> np.ndarray:
    """Planar scan; returns hit points (N, 2) in the robot frame."""
    cfg = cfg or SensorConfig()
    shapes = world.tall(cfg.lidar_plane_height)
    local_angles = 2 * math.pi * np.arange(cfg.n_rays) / cfg.n_rays
    ang = local_angles + pose.heading
    ux, uy = np.cos(ang), np.sin(ang)
    t = np.full(cfg.n_rays, np.inf)
    px, py = pose.x, pose.y
    R = cfg.max_range
    if len(shapes.circ):
        c = shapes.circ
        dx, dy = c[:, 0] - px, c[:, 1] - py
        near = np.hypot(dx, dy) - c[:, 2] <= R
        if near.any():
            dx, dy, r = dx[near], dy[near], c[near, 2]
            b = ux[:, None] * dx[None] + uy[:, None] * dy[None]
            cc = dx * dx + dy * dy - r * r
            disc = b * b - cc[None]
            with np.errstate(invalid="ignore"):
                th = b - np.sqrt(disc)
            th = np.where((disc >= 0) & (th > 0), th, np.inf)
            t = np.minimum(t, th.min(axis=1))
    if len(shapes.rect):
        rc = shapes.rect
        lo_x, hi_x = rc[:, 0] - rc[:, 2], rc[:, 0] + rc[:, 2]
        lo_y, hi_y = rc[:, 1] - rc[:, 3], rc[:, 1] + rc[:, 3]
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_x = 1.0 / ux[:, None]
            inv_y = 1.0 / uy[:, None]
            tx1, tx2 = (lo_x[None] - px) * inv_x, (hi_x[None] - px) * inv_x
            ty1, ty2 = (lo_y[None] - py) * inv_y, (hi_y[None] - py) * inv_y
        # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
        par_x = ux[:, None] == 0
        in_x = (px >= lo_x) & (px <= hi_x)
        tx1 = np.where(par_x, np.where(in_x[None], -np.inf, np.inf), tx1)
        tx2 = np.where(par_x, np.where(in_x[None], np.inf, -np.inf), tx2)
        par_y = uy[:, None] == 0
        in_y = (py >= lo_y) & (py <= hi_y)
        ty1 = np.where(par_y, np.where(in_y[None], -np.inf, np.inf), ty1)
        ty2 = np.where(par_y, np.where(in_y[None], np.inf, -np.inf), ty2)
        tmin = np.maximum(np.minimum(tx1, tx2), np.minimum(ty1, ty2))
        tmax = np.minimum(np.maximum(tx1, tx2), np.maximum(ty1, ty2))
        hit = (tmax >= tmin) & (tmin > 0)
        t = np.minimum(t, np.where(hit, tmin, np.inf).min(axis=1))
    keep = t <= R
    tk = t[keep]
    la = local_angles[keep]
    return np.stack([tk * np.cos(la), tk * np.sin(la)], axis=1)


_PATCH_GRID_CACHE: dict = {}


def patch_grid(extent: float, cells: int) -> np.ndarray:
    """Local-frame centres of patch cells, shape (cells, cells, 2).

    Row index grows with forward distance (row 0 touches the robot); column
    index runs from the robot's left (+y) to its right.
    """
    key = (extent, cells)
    if key not in _PATCH_GRID_CACHE:
        res = extent / cells
        fwd = (np.arange(cells) + 0.5) * res
        lat = extent / 2 - (np.arange(cells) + 0.5) * res
        g = np.stack(np.meshgrid(fwd, lat, indexing="ij"), axis=-1)
        _PATCH_GRID_CACHE[key] = g
    return _PATCH_GRID_CACHE[key]


def render_patch(world: WorldSpec, pose: RobotState, noise_seed: int,
                 cfg: SensorConfig | None = None) -> np.ndarray:
    cfg = cfg or SensorConfig()
    n = cfg.patch_cells
    local = patch_grid(cfg.patch_extent, n)
    wpts = to_world(local, pose.x, pose.y, pose.heading)
    gx, gy = wpts[..., 0], wpts[..., 1]
    patch = np.empty((n, n, 4))
    patch[..., :3] = GROUND_APPEARANCE
    patch[..., 3] = 0.0
    half = cfg.patch_extent / 2
    cxw, cyw = to_world(np.array([half, 0.0]), pose.x, pose.y, pose.heading)
    reach = half * math.sqrt(2)
    order = sorted(range(len(world.obstacles)), key=lambda i: world.obstacles[i].height)
    for i in order:
        o = world.obstacles[i]
        if math.hypot(o.center[0] - cxw, o.center[1] - cyw) > reach + o.radius + 0.5:
            continue
        m = _shape_mask(o, gx, gy)
        if not m.any():
            continue
        patch[m, :3] = o.appearance
        patch[m, 3] = o.height / cfg.max_height
    if cfg.patch_noise > 0:
        rng = np.random.default_rng(noise_seed)
        patch += rng.uniform(-cfg.patch_noise, cfg.patch_noise, patch.shape)
    np.clip(patch, 0.0, 1.0, out=patch)
    return patch


def past_positions_local(history_xy, pose: RobotState, count: int) -> np.ndarray:
    """Last ``count`` positions (oldest first, padded with the oldest) in the pose frame."""
    h = np.asarray(history_xy, dtype=float).reshape(-1, 2)
    if len(h) == 0:
        h = np.array([[pose.x, pose.y]])
    if len(h) < count:
        h = np.vstack([np.repeat(h[:1], count - len(h), axis=0), h])
    return to_local(h[-count:], pose.x, pose.y, pose.heading)


def observe(world: WorldSpec, pose: RobotState, history_xy, noise_seed: int,
            sensor: SensorConfig | None = None, past: int = 10, with_patch: bool = True,
            with_lidar: bool = True) -> Observation:
    sensor = sensor or SensorConfig()
    return Observation(
        position=np.array([pose.x, pose.y]),
        heading=pose.heading,
        pointcloud=raycast_lidar(world, pose, sensor) if with_lidar else np.zeros((0, 2)),
        patch=render_patch(world, pose, noise_seed, sensor) if with_patch else None,
        past_positions=past_positions_local(history_xy, pose, past),
    )


# ---------------------------------------------------------------- collisions


def _check_collision(times, xy, vcmd, i, sim: SimConfig, tol=1e-6):
    t = times[i]
    # stuck: stationary (within eps of the current position) while driving, for the whole window
    if t - times[0] >= sim.stuck_time - tol:
        j = int(np.searchsorted(times, t - sim.stuck_time - tol))
        w = slice(j, i + 1)
        if np.all(vcmd[w] != 0.0):
            d = np.hypot(xy[w, 0] - xy[i, 0], xy[w, 1] - xy[i, 1])
            if np.all(d < sim.stuck_eps):
                return CollisionEvent("stuck", float(t))
    if t - times[0] >= sim.trapped_time - tol:
        j = int(np.searchsorted(times, t - sim.trapped_time - tol))
        if math.hypot(xy[i, 0] - xy[j, 0], xy[i, 1] - xy[j, 1]) < sim.trapped_dist:
            return CollisionEvent("trapped", float(t))
    return None


def detect_collision(history, sim: SimConfig | None = None) -> CollisionEvent | None:
    """Evaluate both heuristics at the last entry of ``history``.

    ``history`` rows are (time, x, y, commanded_linear_velocity); a row of
    length 3 is taken to have a nonzero command.
    """
    sim = sim or SimConfig()
    h = np.asarray(history, dtype=float)
    if h.ndim != 2 or len(h) == 0:
        return None
    vcmd = h[:, 3] if h.shape[1] > 3 else np.ones(len(h))
    return _check_collision(h[:, 0], h[:, 1:3], vcmd, len(h) - 1, sim)


class CollisionMonitor:
    """Incremental wrapper around the heuristics; emits at most one event."""

    def __init__(self, sim: SimConfig | None = None, capacity: int = 4096):
        self.sim = sim or SimConfig()
        self.times = np.empty(capacity)
        self.xy = np.empty((capacity, 2))
        self.vcmd = np.empty(capacity)
        self.n = 0
        self.event: CollisionEvent | None = None

    def reset(self):
        self.n = 0
        self.event = None

    def _compact(self, t):
        # both heuristics only look back max(stuck_time, trapped_time)
        horizon = max(self.sim.stuck_time, self.sim.trapped_time) + 1.0
        j = int(np.searchsorted(self.times[: self.n], t - horizon))
        if j == 0:
            cap = 2 * len(self.times)
            self.times = np.resize(self.times, cap)
            self.xy = np.resize(self.xy, (cap, 2))
            self.vcmd = np.resize(self.vcmd, cap)
            return
        keep = self.n - j
        self.times[:keep] = self.times[j:self.n]
        self.xy[:keep] = self.xy[j:self.n]
        self.vcmd[:keep] = self.vcmd[j:self.n]
        self.n = keep

    def update(self, t, x, y, v_cmd) -> CollisionEvent | None:
        if self.event is not None:
            return None
        if self.n == len(self.times):
            self._compact(t)
        i = self.n
        self.times[i] = t
        self.xy[i] = (x, y)
        self.vcmd[i] = v_cmd
        self.n += 1
        ev = _check_collision(self.times[: self.n], self.xy[: self.n], self.vcmd[: self.n], i, self.sim)
        if ev is not None:
            self.event = ev
        return ev
