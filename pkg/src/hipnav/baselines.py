"""Reference controllers: goal-conditioned behaviour cloning and the
map-privileged A* oracle."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig, TrainConfig
from .imitative import FULL_MASK, downsample_patch, input_dim, load_params, save_params
from .nn import Adam, init_dense, mlp_forward, mlp_backward
from .worldsim import WorldSpec

# ---------------------------------------------------------------- BC


@dataclass
class BCModel:
    cfg: ModelConfig
    params: dict
    channel_mask: tuple[float, ...] = FULL_MASK
    train_seed: int | None = None
    meta: dict = field(default_factory=dict)


def init_bc(cfg: ModelConfig | None = None, seed: int = 0, channel_mask=FULL_MASK) -> BCModel:
    cfg = cfg or ModelConfig()
    rng = np.random.default_rng(seed)
    params: dict = {}
    # encoder layers of the learner, goal appended to the input, linear head
    init_dense(rng, [input_dim(cfg) + 2, *cfg.enc_hidden, 2], "bc.", params, out_scale=0.1)
    return BCModel(cfg, params, tuple(float(m) for m in channel_mask))


def bc_input(model: BCModel, patch, past, goal) -> np.ndarray:
    cfg = model.cfg
    p = np.asarray(patch, dtype=float)
    if p.shape[-2] != cfg.patch_cells:
        p = downsample_patch(p, cfg.patch_cells)
    p = p * np.asarray(model.channel_mask)
    lead = p.shape[:-3]
    past = np.asarray(past, dtype=float)
    goal = np.asarray(goal, dtype=float)
    return np.concatenate([p.reshape(lead + (-1,)), past.reshape(lead + (-1,)), goal], axis=-1)


def _bc_forward(params, x):
    # tanh hidden layers, linear output
    return mlp_forward(params, "bc.", x, final_tanh=False)


def bc_predict(model: BCModel, patch, past, goal) -> np.ndarray:
    """Predicted first displacement (local frame, metres)."""
    out, _ = _bc_forward(model.params, bc_input(model, patch, past, goal))
    return out


def train_bc(dataset, config: TrainConfig | None = None, model_cfg: ModelConfig | None = None,
             channel_mask=FULL_MASK, log=None):
    """Regress the first future displacement given the hindsight goal (the
    example's final future position). Returns (model, per-epoch losses)."""
    config = config or TrainConfig()
    model_cfg = model_cfg or ModelConfig()
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    model = init_bc(model_cfg, int(rng.integers(2**31)), channel_mask)
    model.train_seed = config.seed
    x_all = bc_input(model, dataset.patches, dataset.past, dataset.future[:, -1])
    y_all = dataset.future[:, 0]
    opt = Adam(model.params, lr=config.learning_rate)
    B = config.batch_size
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, B):
            idx = order[s:s + B]
            out, acts = _bc_forward(model.params, x_all[idx])
            r = out - y_all[idx]
            loss = 0.5 * float((r * r).sum(axis=-1).mean())
            if not np.isfinite(loss):
                raise FloatingPointError(f"BC loss diverged at epoch {epoch}")
            grads: dict = {}
            mlp_backward(model.params, "bc.", acts, r / len(idx), grads, final_tanh=False)
            opt.step(model.params, grads)
            total += loss * len(idx)
        losses.append(total / n)
        if log is not None:
            log(f"bc epoch {epoch}: mse {losses[-1]:.5f}")
    return model, losses


BC_SCHEMA = "hipnav.bc"


def save_bc(path, model: BCModel, extra_header: dict | None = None) -> None:
    save_params(path, BC_SCHEMA, model, extra_header)


def load_bc(path) -> BCModel:
    cfg, params, h = load_params(path, BC_SCHEMA)
    return BCModel(cfg, params, tuple(h["channel_mask"]), h["train_seed"], dict(h.get("meta", {})))


# ---------------------------------------------------------------- A* oracle


@dataclass(frozen=True)
class GridMap:
    free: np.ndarray  # (nx, ny) bool
    resolution: float
    x0: float
    y0: float

    def cell(self, p) -> tuple[int, int]:
        i = int(np.clip(math.floor((p[0] - self.x0) / self.resolution), 0, self.free.shape[0] - 1))
        j = int(np.clip(math.floor((p[1] - self.y0) / self.resolution), 0, self.free.shape[1] - 1))
        return i, j

    def center(self, i, j) -> tuple[float, float]:
        return self.x0 + (i + 0.5) * self.resolution, self.y0 + (j + 0.5) * self.resolution


def traversability_grid(world: WorldSpec, resolution: float = 0.5, margin: float = 0.05) -> GridMap:
    """Ground-truth grid: a cell is blocked when a robot disk (plus margin) at
    its centre overlaps a rigid obstacle or the fence. Grass stays free."""
    x0, x1, y0, y1 = world.bounds
    nx = int(round((x1 - x0) / resolution))
    ny = int(round((y1 - y0) / resolution))
    cx = x0 + (np.arange(nx) + 0.5) * resolution
    cy = y0 + (np.arange(ny) + 0.5) * resolution
    X, Y = np.meshgrid(cx, cy, indexing="ij")
    r = world.robot_radius + margin
    free = (X >= x0 + r) & (X <= x1 - r) & (Y >= y0 + r) & (Y <= y1 - r)
    if len(world.rigid):
        free &= world.rigid.clearance_many(X, Y) >= r
    return GridMap(free, resolution, x0, y0)


_MOVES = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]


def astar(grid: GridMap, start, goal):
    """8-connected A* with the octile heuristic. Returns the list of cell
    centres from start to goal (world frame), or None when unreachable.
    Start and goal cells count as free so a robot hugging an obstacle can
    still plan away from it."""
    free = grid.free
    nx, ny = free.shape
    s, g = grid.cell(start), grid.cell(goal)
    sq2 = math.sqrt(2.0)

    def h(c):
        dx, dy = abs(c[0] - g[0]), abs(c[1] - g[1])
        return (dx + dy) + (sq2 - 2.0) * min(dx, dy)

    best = {s: 0.0}
    parent = {s: None}
    heap = [(h(s), 0, 0.0, s)]
    counter = 0
    closed = set()
    while heap:
        _, _, gcost, c = heapq.heappop(heap)
        if c in closed:
            continue
        if c == g:
            path = []
            while c is not None:
                path.append(grid.center(*c))
                c = parent[c]
            return path[::-1]
        closed.add(c)
        for dx, dy in _MOVES:
            n = (c[0] + dx, c[1] + dy)
            if not (0 <= n[0] < nx and 0 <= n[1] < ny) or n in closed:
                continue
            if not free[n] and n != g:
                continue
            if dx and dy and not (free[c[0] + dx, c[1]] and free[c[0], c[1] + dy]):
                continue  # no corner cutting
            ng = gcost + (sq2 if dx and dy else 1.0)
            if ng < best.get(n, math.inf):
                best[n] = ng
                parent[n] = c
                counter += 1
                heapq.heappush(heap, (ng + h(n), counter, ng, n))
    return None


def path_length(path) -> float:
    p = np.asarray(path, dtype=float)
    if len(p) < 2:
        return 0.0
    return float(np.hypot(*np.diff(p, axis=0).T).sum())
