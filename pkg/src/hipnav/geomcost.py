"""Point cloud -> inflated occupancy grid -> bounded position cost.

Grids are egocentric: cell (i, j) covers local x in
[i*res - half, (i+1)*res - half) and local y likewise, where ``half`` is half
the grid side, so the robot sits at the grid centre.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .config import CostmapConfig
from .worldsim import RobotState, to_local

LETHAL = 254
INSCRIBED = 253


@dataclass(frozen=True)
class RawCostGrid:
    cells: np.ndarray  # (n, n) int, values in [0, 254]
    resolution: float
    origin: tuple[float, float]  # world position of the grid centre
    heading: float

    @property
    def width(self) -> int:
        return self.cells.shape[0]

    @property
    def height(self) -> int:
        return self.cells.shape[1]


@dataclass(frozen=True)
class Costmap:
    cells: np.ndarray  # (n, n) float in [0, alpha]
    alpha: float
    mode: str
    resolution: float
    origin: tuple[float, float]
    heading: float


def build_raw(pointcloud, pose: RobotState, cfg: CostmapConfig | None = None) -> RawCostGrid:
    """Mark each point's cell lethal, then inflate around lethal cells."""
    cfg = cfg or CostmapConfig()
    if cfg.resolution <= 0:
        raise ValueError("resolution must be positive")
    n, res = cfg.cells, cfg.resolution
    half = n * res / 2
    pts = np.asarray(pointcloud, dtype=float).reshape(-1, 2)
    lethal = np.zeros((n, n), dtype=bool)
    if len(pts):
        idx = np.floor((pts + half) / res).astype(int)
        ok = np.all((idx >= 0) & (idx < n), axis=1)
        lethal[idx[ok, 0], idx[ok, 1]] = True
    cells = np.zeros((n, n), dtype=np.int16)
    if lethal.any():
        # distance (m) from every cell centre to the nearest lethal cell centre
        d = ndimage.distance_transform_edt(~lethal, sampling=res)
        infl = 253.0 * np.exp(-cfg.decay * np.maximum(0.0, d - cfg.inscribed_radius))
        cost = np.where(d <= cfg.inflation_radius + 1e-9, np.floor(infl + 0.5), 0.0)
        cells = cost.astype(np.int16)
        cells[lethal] = LETHAL
    return RawCostGrid(cells, res, (pose.x, pose.y), pose.heading)


def normalize(raw: RawCostGrid, alpha: float, mode: str = "cellwise") -> Costmap:
    """Squash raw costs into [0, alpha].

    ``global_softmax`` is alpha * softmax over all cells; ``cellwise`` is
    alpha * exp(c - 254), which keeps lethal cells at exactly alpha.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    c = raw.cells.astype(float)
    if mode == "global_softmax":
        e = np.exp(c - c.max())
        vals = alpha * e / e.sum()
    elif mode == "cellwise":
        vals = alpha * np.exp(c - LETHAL)
    else:
        raise ValueError(f"unknown normalisation mode {mode!r}")
    return Costmap(np.clip(vals, 0.0, alpha), float(alpha), mode, raw.resolution, raw.origin, raw.heading)


def query(costmap: Costmap, world_position) -> np.ndarray | float:
    """Nearest-cell cost at world positions (..., 2); off-grid positions cost alpha."""
    p = np.asarray(world_position, dtype=float)
    local = to_local(p, costmap.origin[0], costmap.origin[1], costmap.heading)
    n = costmap.cells.shape[0]
    half = n * costmap.resolution / 2
    idx = np.floor((local + half) / costmap.resolution).astype(int)
    ok = np.all((idx >= 0) & (idx < n), axis=-1)
    out = np.full(ok.shape, costmap.alpha)
    out[ok] = costmap.cells[idx[ok][..., 0], idx[ok][..., 1]]
    return float(out) if out.ndim == 0 else out


def traj_cost(costmap: Costmap, tau_world) -> np.ndarray | float:
    """Sum of per-point costs over the last-but-one axis of (..., H, 2)."""
    return np.sum(query(costmap, tau_world), axis=-1)


def costmap_from_scan(pointcloud, pose: RobotState, cfg: CostmapConfig, alpha: float,
                      mode: str | None = None) -> Costmap:
    return normalize(build_raw(pointcloud, pose, cfg), alpha, mode or cfg.mode)


# ---------------------------------------------------------------- PGM dump


def dump_pgm(raw: RawCostGrid, header: dict | None = None) -> str:
    """Plain (P2) grey map of the raw grid, one comment line of JSON metadata."""
    meta = {
        "resolution": raw.resolution,
        "origin": list(raw.origin),
        "heading": raw.heading,
    }
    meta.update(header or {})
    n, m = raw.cells.shape
    lines = ["P2", "# hipnav-costmap " + json.dumps(meta, sort_keys=True), f"{n} {m}", str(LETHAL)]
    # PGM rows are the grid's j index so the image reads x to the right
    for j in range(m):
        lines.append(" ".join(str(int(v)) for v in raw.cells[:, j]))
    return "\n".join(lines) + "\n"


def load_pgm(text: str) -> tuple[RawCostGrid, dict]:
    rows = text.splitlines()
    if not rows or rows[0].strip() != "P2":
        raise ValueError("not a plain PGM file")
    meta = {}
    body = []
    for line in rows[1:]:
        if line.startswith("# hipnav-costmap "):
            meta = json.loads(line[len("# hipnav-costmap "):])
        elif line.startswith("#"):
            continue
        else:
            body.extend(line.split())
    n, m = int(body[0]), int(body[1])  # body[2] is the max grey value
    vals = np.array([int(v) for v in body[3:]], dtype=np.int16).reshape(m, n).T
    raw = RawCostGrid(vals, float(meta["resolution"]), tuple(meta["origin"]), float(meta["heading"]))
    return raw, meta
