"""Hybrid criterion over a fixed trajectory library, plus the tracking controller.

    L(tau) = C_directive + (1 - phi) * C_learned + phi * sum_i C_costmap(tau_i)

C_learned = -log q(tau | o) with log q floored at -eta, so it lies in
[-eta, eta] and delta = 2 eta + 1 makes region membership dominate.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import imitative
from .config import ControllerConfig, PlannerConfig, RegionConfig
from .geomcost import Costmap, traj_cost
from .worldsim import Action, RobotState, to_world, wrap_angle


@dataclass(frozen=True)
class DirectiveRegion:
    """Closed rectangle on the robot->goal axis, centred ``offset`` ahead."""

    width: float
    offset: float
    length: float
    goal_direction: tuple[float, float]

    @classmethod
    def toward(cls, pose: RobotState, d, cfg: RegionConfig | None = None) -> "DirectiveRegion":
        cfg = cfg or RegionConfig()
        v = np.asarray(d, dtype=float) - (pose.x, pose.y)
        n = float(np.hypot(*v))
        if n < 1e-9:
            raise ValueError("goal coincides with the robot position; direction undefined")
        return cls(cfg.width, cfg.offset, cfg.length, (float(v[0] / n), float(v[1] / n)))

    def contains(self, pose: RobotState, points, tol: float = 1e-9) -> np.ndarray:
        p = np.asarray(points, dtype=float) - (pose.x, pose.y)
        ux, uy = self.goal_direction
        along = p[..., 0] * ux + p[..., 1] * uy
        lat = -p[..., 0] * uy + p[..., 1] * ux
        lo = self.offset - self.length / 2
        hi = self.offset + self.length / 2
        return (along >= lo - tol) & (along <= hi + tol) & (np.abs(lat) <= self.width / 2 + tol)


def directive_cost(tau_world, pose: RobotState, d, region: RegionConfig | None = None,
                   delta: float = 129.0):
    """0 if the final point of tau lies in the region, delta otherwise."""
    reg = DirectiveRegion.toward(pose, d, region)
    inside = reg.contains(pose, np.asarray(tau_world, dtype=float)[..., -1, :])
    out = np.where(inside, 0.0, float(delta))
    return float(out) if out.ndim == 0 else out


def learned_cost(model, context, tau_local, past, eta: float):
    """(-log q floored at -eta, flag for non-finite densities)."""
    try:
        with np.errstate(all="ignore"):
            lp = np.asarray(imitative.log_prob(model, context, tau_local, past), dtype=float)
    except ValueError:
        lp = np.full(np.shape(tau_local)[:-2], np.nan)
    bad = ~np.isfinite(lp)
    c = np.where(bad, eta, np.minimum(-lp, eta))
    return c, bad


@dataclass
class CostBreakdown:
    directive: np.ndarray
    learned: np.ndarray
    costmap: np.ndarray
    total: np.ndarray
    flagged: np.ndarray  # learned term replaced by the floor

    def row(self, i: int) -> dict:
        return {
            "directive": float(self.directive[i]),
            "learned": float(self.learned[i]),
            "costmap": float(self.costmap[i]),
            "total": float(self.total[i]),
            "flagged": bool(self.flagged[i]),
        }


def cost_terms(tau_local, pose: RobotState, past, context, model, costmap: Costmap | None, d,
               config: PlannerConfig) -> CostBreakdown:
    """Vectorised criterion over candidates of shape (K, H, 2)."""
    tau_local = np.asarray(tau_local, dtype=float)
    K = tau_local.shape[0]
    phi = config.phi
    tau_world = to_world(tau_local, pose.x, pose.y, pose.heading)
    c_dir = np.asarray(directive_cost(tau_world, pose, d, config.region, config.delta_value), dtype=float)
    c_dir = np.broadcast_to(c_dir, (K,))
    if phi < 1.0:
        if model is None:
            raise ValueError("phi < 1 requires a learned model")
        c_learn, bad = learned_cost(model, context, tau_local, past, config.eta)
    else:
        c_learn, bad = np.zeros(K), np.zeros(K, dtype=bool)
    if phi > 0.0:
        if costmap is None:
            raise ValueError("phi > 0 requires a costmap")
        c_map = np.asarray(traj_cost(costmap, tau_world), dtype=float)
    else:
        c_map = np.zeros(K)
    total = c_dir + (1.0 - phi) * c_learn + phi * c_map
    return CostBreakdown(np.array(c_dir), c_learn, c_map, total, bad)


def combined_cost(tau_local, observation, model, costmap, d, config: PlannerConfig,
                  context=None):
    """Scalar criterion for one local-frame trajectory; returns (L, breakdown row)."""
    pose = RobotState(float(observation.position[0]), float(observation.position[1]), observation.heading)
    if context is None and config.phi < 1.0:
        context = imitative.encode(model, observation)
    b = cost_terms(np.asarray(tau_local, dtype=float)[None], pose, observation.past_positions,
                   context, model, costmap, d, config)
    return float(b.total[0]), b.row(0)


@dataclass
class Plan:
    index: int
    local: np.ndarray  # (H, 2)
    world: np.ndarray  # (H, 2)
    breakdown: CostBreakdown
    pose: RobotState
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("candidate,directive,learned,costmap,total,flagged,chosen\n")
        b = self.breakdown
        for i in range(len(b.total)):
            buf.write(f"{i},{b.directive[i]:.6f},{b.learned[i]:.6f},{b.costmap[i]:.6f},"
                      f"{b.total[i]:.6f},{int(b.flagged[i])},{int(i == self.index)}\n")
        return buf.getvalue()


def plan(library, model, costmap, observation, d, config: PlannerConfig | None = None,
         context=None) -> Plan:
    """argmin of the criterion over the library; ties go to the lowest index."""
    config = config or PlannerConfig()
    cands = np.asarray(getattr(library, "centroids", library), dtype=float)
    if cands.ndim != 3 or len(cands) == 0:
        raise ValueError("empty trajectory library")
    pose = RobotState(float(observation.position[0]), float(observation.position[1]), observation.heading)
    if context is None and config.phi < 1.0:
        context = imitative.encode(model, observation)
    b = cost_terms(cands, pose, observation.past_positions, context, model, costmap, d, config)
    i = int(np.argmin(b.total))
    return Plan(i, cands[i].copy(), to_world(cands[i], pose.x, pose.y, pose.heading), b, pose)


# ---------------------------------------------------------------- control


@dataclass
class ControllerMemory:
    prev_error: float | None = None
    integral: float = 0.0


def select_waypoint(path_world, state: RobotState, lookahead: float):
    """First waypoint at least ``lookahead`` away, searching forward from the
    nearest one so points already passed are ignored; else the last one."""
    p = np.asarray(path_world, dtype=float).reshape(-1, 2)
    dist = np.hypot(p[:, 0] - state.x, p[:, 1] - state.y)
    start = int(np.argmin(dist))
    far = np.flatnonzero(dist[start:] >= lookahead)
    return p[start + far[0]] if len(far) else p[-1]


def steer(target, state: RobotState, gains: ControllerConfig, memory: ControllerMemory,
          dt: float):
    """PID on heading error toward ``target``; speed proportional to distance."""
    dx, dy = target[0] - state.x, target[1] - state.y
    dist = math.hypot(dx, dy)
    if dist < 1e-9:
        return Action(0.0, 0.0), ControllerMemory(0.0, memory.integral)
    err = wrap_angle(math.atan2(dy, dx) - state.heading)
    rate = 0.0 if memory.prev_error is None else wrap_angle(err - memory.prev_error) / dt
    integral = memory.integral + err * dt
    w = gains.kp * err + gains.kd * rate + gains.ki * integral
    w = float(np.clip(w, -gains.w_max, gains.w_max))
    v = min(gains.kv * dist, gains.v_max) * max(0.0, math.cos(err))
    return Action(float(v), w), ControllerMemory(err, integral)


def track(plan_or_path, state: RobotState, gains: ControllerConfig | None = None,
          memory: ControllerMemory | None = None, dt: float = 1.0 / 30.0):
    """Action toward the lookahead waypoint of a plan; returns (action, memory)."""
    gains = gains or ControllerConfig()
    memory = memory or ControllerMemory()
    path = plan_or_path.world if isinstance(plan_or_path, Plan) else plan_or_path
    if len(np.asarray(path).reshape(-1, 2)) == 0:
        raise ValueError("empty plan")
    target = select_waypoint(path, state, gains.lookahead)
    return steer(target, state, gains, memory, dt)
