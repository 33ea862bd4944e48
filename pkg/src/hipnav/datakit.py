"""Self-supervised data: sticky random driving, windowed examples and the
k-means trajectory library."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .config import DataConfig, SensorConfig, SimConfig
from .imitative import downsample_patch
from .worldsim import (
    ANGULAR_CHOICES,
    LINEAR_CHOICES,
    Action,
    CollisionMonitor,
    RobotState,
    WorldSpec,
    render_patch,
    sample_free_pose,
    step,
    to_local,
)

# Forward-biased weights over the discrete action grid. Uniform weights make
# the trapped heuristic fire every ~15 s of driving.
LINEAR_WEIGHTS = (0.1, 0.3, 0.6)
ANGULAR_WEIGHTS = (0.1, 0.2, 0.4, 0.2, 0.1)

DATASET_SCHEMA = "hipnav.dataset"
LOG_SCHEMA = "hipnav.rawlog"
LIBRARY_SCHEMA = "hipnav.library"
FORMAT_VERSION = 1


@dataclass
class RawLog:
    world: WorldSpec
    seed: int
    f_sim: float
    t: np.ndarray  # (N,)
    pose: np.ndarray  # (N, 3)
    action: np.ndarray  # (N, 2) command applied from t[k] to t[k+1]
    segment: np.ndarray  # (N,) increments at every respawn
    collisions: list = field(default_factory=list)  # (step, time, kind)
    respawns: list = field(default_factory=list)  # first step of each new segment

    def __len__(self):
        return len(self.t)

    def noise_seed(self, k: int) -> int:
        return observation_noise_seed(self.seed, k)


def observation_noise_seed(seed: int, k: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(k), 7])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _sticky_action(rng):
    v = LINEAR_CHOICES[rng.choice(len(LINEAR_CHOICES), p=LINEAR_WEIGHTS)]
    w = ANGULAR_CHOICES[rng.choice(len(ANGULAR_CHOICES), p=ANGULAR_WEIGHTS)]
    return Action(float(v), float(w))


def collect(world: WorldSpec, steps: int, seed: int, data: DataConfig | None = None,
            sim: SimConfig | None = None, start: RobotState | None = None) -> RawLog:
    """Drive with sticky random actions, respawning after every collision event."""
    if steps <= 0:
        raise ValueError("steps must be positive")
    data = data or DataConfig()
    sim = sim or SimConfig()
    rng = np.random.default_rng(seed)
    dt = 1.0 / sim.f_sim
    state = start if start is not None else sample_free_pose(world, rng)
    monitor = CollisionMonitor(sim)
    t = np.empty(steps)
    pose = np.empty((steps, 3))
    act = np.empty((steps, 2))
    seg = np.empty(steps, dtype=np.int64)
    collisions, respawns = [], []
    segment = 0
    hold = 0
    action = Action(0.0, 0.0)
    lo, hi = data.sticky_min, data.sticky_max
    for k in range(steps):
        tk = k * dt
        t[k] = tk
        pose[k] = (state.x, state.y, state.heading)
        seg[k] = segment
        if hold <= 0:
            action = _sticky_action(rng)
            hold = max(1, int(round(rng.uniform(lo, hi) * sim.f_sim)))
        act[k] = (action.linear, action.angular)
        ev = monitor.update(tk, state.x, state.y, action.linear)
        if ev is not None:
            collisions.append((k, tk, ev.kind))
            state = sample_free_pose(world, rng)
            segment += 1
            respawns.append(k + 1)
            monitor.reset()
            hold = 0
            continue
        state = step(world, RobotState(state.x, state.y, state.heading, tk), action, dt)
        hold -= 1
    return RawLog(world, int(seed), sim.f_sim, t, pose, act, seg, collisions, respawns)


@dataclass
class Dataset:
    past: np.ndarray  # (N, H_past, 2)
    future: np.ndarray  # (N, H, 2)
    patches: np.ndarray  # (N, c, c, 4) float32, encoder resolution
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.future)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.past[idx], self.future[idx], self.patches[idx], dict(self.meta))


def exclusion_spans(log: RawLog, data: DataConfig, sim: SimConfig):
    """Time intervals no example window may touch.

    A stuck event is detected ``stuck_time`` after contact, so its span
    reaches back to the contact plus the safety margin.
    """
    spans = []
    for _k, tc, kind in log.collisions:
        back = sim.stuck_time if kind == "stuck" else 0.0
        spans.append((tc - back - data.collision_margin, tc))
    return spans


def window_starts(log: RawLog, f_traj: float, data: DataConfig | None = None,
                  sim: SimConfig | None = None) -> np.ndarray:
    """Log step indices at which valid example windows start."""
    data = data or DataConfig()
    sim = sim or SimConfig(f_sim=log.f_sim)
    stride = int(round(log.f_sim / f_traj))
    L = data.past + data.horizon
    samples = np.arange(0, len(log), stride)
    if len(samples) < L:
        return np.zeros(0, dtype=np.int64)
    first = samples[: len(samples) - L + 1]
    last = first + (L - 1) * stride
    ok = log.segment[first] == log.segment[last]
    t0, t1 = log.t[first], log.t[last]
    for a, b in exclusion_spans(log, data, sim):
        ok &= (t1 < a) | (t0 > b)
    return first[ok]


def make_dataset(log: RawLog, f_traj: float | None = None, data: DataConfig | None = None,
                 sensor: SensorConfig | None = None, sim: SimConfig | None = None,
                 patch_cells: int = 20) -> Dataset:
    """Subsample to ``f_traj`` and cut (past, patch, future) windows in the
    reference-step frame; the patch is stored at encoder resolution."""
    data = data or DataConfig()
    sensor = sensor or SensorConfig()
    sim = sim or SimConfig(f_sim=log.f_sim)
    f_traj = f_traj or data.f_traj
    stride = int(round(log.f_sim / f_traj))
    starts = window_starts(log, f_traj, data, sim)
    P, H = data.past, data.horizon
    n = len(starts)
    past = np.empty((n, P, 2))
    fut = np.empty((n, H, 2))
    patches = np.empty((n, patch_cells, patch_cells, 4), dtype=np.float32)
    offs = np.arange(P + H) * stride
    for e, s in enumerate(starts):
        idx = s + offs
        ref = idx[P - 1]
        x, y, th = log.pose[ref]
        loc = to_local(log.pose[idx, :2], x, y, th)
        past[e] = loc[:P]
        fut[e] = loc[P:]
        pr = render_patch(log.world, RobotState(x, y, th), log.noise_seed(int(ref)), sensor)
        patches[e] = downsample_patch(pr, patch_cells)
    meta = {
        "collection_seeds": [log.seed],
        "world_seeds": [log.world.seed],
        "f_traj": f_traj,
        "horizon": H,
        "past": P,
        "patch_cells": patch_cells,
        "count": n,
        "collisions": len(log.collisions),
    }
    return Dataset(past, fut, patches, meta)


def merge_datasets(parts) -> Dataset:
    parts = list(parts)
    meta = dict(parts[0].meta)
    meta["collection_seeds"] = [s for p in parts for s in p.meta.get("collection_seeds", [])]
    meta["world_seeds"] = [s for p in parts for s in p.meta.get("world_seeds", [])]
    meta["collisions"] = sum(p.meta.get("collisions", 0) for p in parts)
    ds = Dataset(
        np.concatenate([p.past for p in parts]),
        np.concatenate([p.future for p in parts]),
        np.concatenate([p.patches for p in parts]),
        meta,
    )
    ds.meta["count"] = len(ds)
    return ds


# ---------------------------------------------------------------- library


@dataclass
class TrajectoryLibrary:
    centroids: np.ndarray  # (K, H, 2) local frame
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.centroids)

    def __len__(self):
        return self.K


def _sqdist(X, C):
    return np.maximum((X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None], 0.0)


def kmeans(X, K: int, rng, iters: int = 100):
    """Lloyd's algorithm; returns (centroids, labels). Empty clusters are
    re-seeded from the point farthest from its centroid."""
    uniq = np.unique(X, axis=0)
    if len(uniq) < K:
        raise ValueError(f"only {len(uniq)} distinct examples for K={K}")
    C = uniq[rng.choice(len(uniq), K, replace=False)].copy()
    labels = None
    for _ in range(iters):
        d = _sqdist(X, C)
        new = d.argmin(1)
        counts = np.bincount(new, minlength=K)
        for k in np.flatnonzero(counts == 0):
            dmin = d[np.arange(len(X)), new]
            far = int(dmin.argmax())
            C[k] = X[far]
            new[far] = k
            d[far] = np.inf
            d[far, k] = 0.0
            counts = np.bincount(new, minlength=K)
        sums = np.zeros_like(C)
        np.add.at(sums, new, X)
        C = sums / counts[:, None]
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    labels = _sqdist(X, C).argmin(1)
    return C, labels


def build_library(dataset: Dataset, K: int, seed: int, iters: int = 100) -> TrajectoryLibrary:
    n = len(dataset)
    if K <= 0 or K > n:
        raise ValueError(f"K must lie in [1, {n}], got {K}")
    H = dataset.future.shape[1]
    X = dataset.future.reshape(n, 2 * H)
    C, _ = kmeans(X, K, np.random.default_rng(seed), iters)
    # lexicographic by final point, then by the rest of the vector
    keys = [C[:, j] for j in reversed(range(2 * H - 2))] + [C[:, 2 * H - 1], C[:, 2 * H - 2]]
    order = np.lexsort(keys)
    return TrajectoryLibrary(C[order].reshape(K, H, 2), {"seed": seed, "K": K, "iters": iters})


def wcss(X, C, labels) -> float:
    return float(((X - C[labels]) ** 2).sum())


# ---------------------------------------------------------------- files


def save_dataset(path, ds: Dataset, extra_header: dict | None = None):
    header = dict(ds.meta)
    header.update(extra_header or {})
    fileio.write_binary(path, DATASET_SCHEMA, FORMAT_VERSION, header,
                        {"past": ds.past, "future": ds.future, "patches": ds.patches})


def load_dataset(path) -> Dataset:
    header, arrays = fileio.read_binary(path, DATASET_SCHEMA, FORMAT_VERSION)
    return Dataset(arrays["past"], arrays["future"], arrays["patches"], header)


def save_log(path, log: RawLog, extra_header: dict | None = None):
    header = {
        "seed": log.seed,
        "f_sim": log.f_sim,
        "world": log.world.to_dict(),
        "collisions": [list(c) for c in log.collisions],
        "respawns": list(log.respawns),
        "steps": len(log),
    }
    header.update(extra_header or {})
    fileio.write_binary(path, LOG_SCHEMA, FORMAT_VERSION, header,
                        {"t": log.t, "pose": log.pose, "action": log.action, "segment": log.segment})


def load_log(path) -> RawLog:
    header, a = fileio.read_binary(path, LOG_SCHEMA, FORMAT_VERSION)
    return RawLog(
        WorldSpec.from_dict(header["world"]), int(header["seed"]), float(header["f_sim"]),
        a["t"], a["pose"], a["action"], a["segment"],
        [(int(k), float(t), str(kind)) for k, t, kind in header["collisions"]],
        [int(r) for r in header["respawns"]],
    )


def save_library(path, lib: TrajectoryLibrary, extra_header: dict | None = None):
    header = dict(lib.meta)
    header.update(extra_header or {})
    fileio.write_binary(path, LIBRARY_SCHEMA, FORMAT_VERSION, header, {"centroids": lib.centroids})


def load_library(path) -> TrajectoryLibrary:
    header, a = fileio.read_binary(path, LIBRARY_SCHEMA, FORMAT_VERSION)
    return TrajectoryLibrary(a["centroids"], header)


def library_arc_length(lib: TrajectoryLibrary) -> np.ndarray:
    pts = np.concatenate([np.zeros((lib.K, 1, 2)), lib.centroids], axis=1)
    return np.linalg.norm(np.diff(pts, axis=1), axis=-1).sum(axis=1)


def max_reach(data: DataConfig | None = None, v_max: float = 1.0) -> float:
    data = data or DataConfig()
    return data.horizon * v_max / data.f_traj


