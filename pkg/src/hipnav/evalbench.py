"""Closed-loop benchmark: seeded episode specs, policies, success metrics
normalised by the map-privileged oracle, phi sweeps and channel ablations."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import baselines, imitative
from .config import Config, PlannerConfig, stage_seed
from .datakit import observation_noise_seed
from .geomcost import build_raw, normalize
from .planner import ControllerMemory, plan, steer, track
from .worldsim import (
    ANGULAR_CHOICES,
    LINEAR_CHOICES,
    Action,
    CollisionMonitor,
    RobotState,
    WorldSpec,
    observe,
    past_positions_local,
    render_patch,
    sample_free_pose,
    step,
    wrap_angle,
)

METHODS = ("hybrid", "learner_only", "costmap_only", "bc", "straight", "random", "oracle")
MASKS = {
    "appearance+height": (1.0, 1.0, 1.0, 1.0),
    "appearance": (1.0, 1.0, 1.0, 0.0),
    "height": (0.0, 0.0, 0.0, 1.0),
    "none": (0.0, 0.0, 0.0, 0.0),
}


@dataclass(frozen=True)
class EpisodeSpec:
    index: int
    world_index: int
    world_seed: int
    start: tuple[float, float, float]
    goal: tuple[float, float]
    timeout: float
    goal_radius: float
    seed: int

    def key(self) -> str:
        return (f"{self.index},{self.world_index},{self.world_seed},"
                + ",".join(f"{v:.12g}" for v in (*self.start, *self.goal, self.timeout, self.goal_radius))
                + f",{self.seed}")


@dataclass(frozen=True)
class EpisodeResult:
    outcome: str  # success | collision | timeout | no_path
    kind: str | None  # stuck | trapped for collisions
    path_length: float
    elapsed: float
    world_index: int = -1

    @property
    def success(self) -> bool:
        return self.outcome == "success"


def make_specs(worlds, n: int, seed: int, cfg: Config | None = None):
    """Seeded start/goal pairs cycling over ``worlds``; the start heading
    points at the goal."""
    cfg = cfg or Config()
    ec = cfg.eval
    if n < 1:
        raise ValueError("n_episodes must be at least 1")
    rng = np.random.default_rng(seed)
    specs = []
    for e in range(n):
        wi = e % len(worlds)
        w = worlds[wi]
        for _ in range(10000):
            s = sample_free_pose(w, rng, margin=0.5)
            r = rng.uniform(ec.min_goal_dist, ec.max_goal_dist)
            a = rng.uniform(-math.pi, math.pi)
            gx, gy = s.x + r * math.cos(a), s.y + r * math.sin(a)
            if w.is_free(gx, gy, margin=0.5, avoid_grass=True):
                break
        else:
            raise RuntimeError("could not place a goal")
        specs.append(EpisodeSpec(e, wi, w.seed, (s.x, s.y, a), (gx, gy), ec.timeout, ec.goal_radius,
                                 int(rng.integers(2**31))))
    return specs


# ---------------------------------------------------------------- policies


class Policy:
    name = "policy"
    replan_hz = 1.0

    def reset(self, world: WorldSpec, spec: EpisodeSpec, cfg: Config):
        self.world, self.spec, self.cfg = world, spec, cfg
        self.goal = np.array(spec.goal)
        self.memory = ControllerMemory()

    def replan(self, state: RobotState, history, k: int):
        pass

    def act(self, state: RobotState, dt: float) -> Action:
        raise NotImplementedError


class StraightPolicy(Policy):
    """Steer straight at the goal, blind to obstacles."""

    name = "straight"

    def act(self, state, dt):
        a, self.memory = steer(self.goal, state, self.cfg.controller, self.memory, dt)
        return a


class RandomPolicy(Policy):
    """Uniform discrete actions, resampled at ``random_hz``."""

    name = "random"

    def reset(self, world, spec, cfg):
        super().reset(world, spec, cfg)
        self.replan_hz = cfg.eval.random_hz
        self.rng = np.random.default_rng(spec.seed)
        self.action = Action(0.0, 0.0)

    def replan(self, state, history, k):
        self.action = Action(float(self.rng.choice(LINEAR_CHOICES)), float(self.rng.choice(ANGULAR_CHOICES)))

    def act(self, state, dt):
        return self.action


class PlannerPolicy(Policy):
    """Library planner under the hybrid criterion at ``replan_hz``."""

    def __init__(self, model, library, phi: float, name: str = "hybrid"):
        self.model, self.library, self.phi, self.name = model, library, phi, name

    def reset(self, world, spec, cfg):
        super().reset(world, spec, cfg)
        self.pcfg = replace(cfg.planner, phi=self.phi)
        self.replan_hz = cfg.planner.replan_hz
        self.path = None

    def replan(self, state, history, k):
        cfg = self.cfg
        obs = observe(self.world, state, history, observation_noise_seed(self.spec.seed, k), cfg.sensor,
                      past=cfg.data.past, with_patch=self.phi < 1.0, with_lidar=self.phi > 0.0)
        cmap = None
        if self.phi > 0.0:
            cmap = normalize(build_raw(obs.pointcloud, state, cfg.costmap), cfg.alpha, cfg.costmap.mode)
        p = plan(self.library, self.model, cmap, obs, self.goal, self.pcfg)
        self.path = p.world
        self.memory = ControllerMemory()
        self.last_plan = p
        # no candidate ends in the region: rotate toward the goal until one does
        self.recovering = bool(p.breakdown.directive[p.index] > 0.0)

    def act(self, state, dt):
        if self.recovering:
            g = self.goal - (state.x, state.y)
            err = wrap_angle(math.atan2(g[1], g[0]) - state.heading)
            ctl = self.cfg.controller
            return Action(0.0, float(np.clip(ctl.kp * err, -ctl.w_max, ctl.w_max)))
        a, self.memory = track(self.path, state, self.cfg.controller, self.memory, dt)
        return a


class BCPolicy(Policy):
    """Predicts the next 1/f_traj displacement and converts it to a control."""

    name = "bc"

    def __init__(self, model):
        self.model = model

    def reset(self, world, spec, cfg):
        super().reset(world, spec, cfg)
        self.replan_hz = cfg.eval.bc_hz
        self.action = Action(0.0, 0.0)

    def replan(self, state, history, k):
        cfg = self.cfg
        patch = render_patch(self.world, state, observation_noise_seed(self.spec.seed, k), cfg.sensor)
        past = past_positions_local(history, state, cfg.data.past)
        g = self.goal - (state.x, state.y)
        c, s = math.cos(state.heading), math.sin(state.heading)
        g_loc = np.array([c * g[0] + s * g[1], -s * g[0] + c * g[1]])
        reach = cfg.data.horizon * cfg.controller.v_max / cfg.data.f_traj
        g_in = g_loc / max(np.hypot(*g_loc), 1e-9) * reach
        disp = baselines.bc_predict(self.model, patch, past, g_in)
        ctl = cfg.controller
        v = min(float(np.hypot(*disp)) * cfg.data.f_traj, ctl.v_max)
        w = float(np.clip(ctl.kp * math.atan2(disp[1], disp[0]), -ctl.w_max, ctl.w_max)) if v > 1e-6 else 0.0
        self.action = Action(v, w)

    def act(self, state, dt):
        return self.action


class OraclePolicy(Policy):
    """A* on the coarse ground-truth grid, tracked by the shared controller.
    The path is recomputed once per ``replan_hz`` tick only when the robot
    has drifted more than a cell from it."""

    name = "oracle"

    def reset(self, world, spec, cfg):
        super().reset(world, spec, cfg)
        self.replan_hz = 1.0
        self.grid = oracle_grid(world, cfg.eval.oracle_resolution)
        self.path = None
        self.failed = False

    def _search(self, state):
        p = baselines.astar(self.grid, (state.x, state.y), self.spec.goal)
        if p is None:
            self.failed = True
            return
        p = np.asarray(p)
        p[0] = (state.x, state.y)
        p[-1] = self.spec.goal
        self.path = p

    def replan(self, state, history, k):
        if self.path is None:
            self._search(state)
            return
        d = np.hypot(self.path[:, 0] - state.x, self.path[:, 1] - state.y).min()
        if d > self.grid.resolution * 1.5:
            self._search(state)

    def act(self, state, dt):
        if self.path is None:
            return Action(0.0, 0.0)
        a, self.memory = track(self.path, state, self.cfg.controller, self.memory, dt)
        return a


_GRID_CACHE: dict = {}


def oracle_grid(world: WorldSpec, resolution: float):
    key = (world.to_json(), resolution)
    if key not in _GRID_CACHE:
        if len(_GRID_CACHE) > 64:
            _GRID_CACHE.clear()
        _GRID_CACHE[key] = baselines.traversability_grid(world, resolution)
    return _GRID_CACHE[key]


def oracle_policy(world: WorldSpec | None = None) -> OraclePolicy:
    return OraclePolicy()


# ---------------------------------------------------------------- rollout


def run_episode(world: WorldSpec, policy: Policy, spec: EpisodeSpec, cfg: Config | None = None) -> EpisodeResult:
    """Closed loop at f_sim; the policy replans on its own cadence."""
    cfg = cfg or Config()
    f_sim = cfg.sim.f_sim
    dt = 1.0 / f_sim
    hist_every = int(round(f_sim / cfg.data.f_traj))
    policy.reset(world, spec, cfg)
    replan_every = max(1, int(round(f_sim / policy.replan_hz)))
    state = RobotState(*spec.start)
    monitor = CollisionMonitor(cfg.sim)
    history = []
    length = 0.0
    gx, gy = spec.goal
    n_steps = int(round(spec.timeout * f_sim))
    for k in range(n_steps + 1):
        t = k * dt
        if math.hypot(state.x - gx, state.y - gy) <= spec.goal_radius:
            return EpisodeResult("success", None, length, t, spec.world_index)
        if k == n_steps:
            break
        if k % hist_every == 0:
            history.append((state.x, state.y))
        if k % replan_every == 0:
            policy.replan(state, history, k)
            if getattr(policy, "failed", False):
                return EpisodeResult("no_path", None, length, t, spec.world_index)
        a = policy.act(state, dt)
        ev = monitor.update(t, state.x, state.y, a.linear)
        if ev is not None:
            return EpisodeResult("collision", ev.kind, length, t, spec.world_index)
        nxt = step(world, state, a, dt)
        length += math.hypot(nxt.x - state.x, nxt.y - state.y)
        state = nxt
    return EpisodeResult("timeout", None, length, spec.timeout, spec.world_index)


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    method: str
    phi: float | None
    environment: str
    n: int
    successes: int
    counts: dict
    raw_rate: float
    normalized_rate: float
    ci: float
    results: list = field(default_factory=list, repr=False)

    def row(self) -> str:
        phi = "" if self.phi is None else f"{self.phi:.2f}"
        c = self.counts
        return (f"{self.method},{phi},{self.environment},{self.n},{self.successes},"
                f"{c.get('collision', 0)},{c.get('timeout', 0)},{c.get('no_path', 0)},"
                f"{self.raw_rate:.4f},{self.normalized_rate:.4f},{self.ci:.4f}")


CSV_HEADER = "method,phi,environment,n,successes,collisions,timeouts,no_path,raw_rate,normalized_rate,ci"


def reports_csv(reports) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for r in reports:
        buf.write(r.row() + "\n")
    return buf.getvalue()


def binomial_halfwidth(p: float, n: int, z: float = 1.96) -> float:
    return z * math.sqrt(max(p * (1 - p), 0.0) / n) if n else float("nan")


def summarize(method, phi, environment, results, oracle_rate: float | None) -> MetricsReport:
    n = len(results)
    succ = sum(r.success for r in results)
    counts = {}
    for r in results:
        counts[r.outcome] = counts.get(r.outcome, 0) + 1
    raw = succ / n
    if oracle_rate is None:
        norm = 1.0 if succ else 0.0
    else:
        norm = raw / oracle_rate if oracle_rate > 0 else float("nan")
    return MetricsReport(method, phi, environment, n, succ, counts, raw, norm,
                         binomial_halfwidth(raw, n), list(results))


@dataclass
class Assets:
    """Everything a policy might need besides the world."""

    model: object = None
    library: object = None
    bc: object = None
    oracle_cache: dict = field(default_factory=dict)


def make_policy(method: str, assets: Assets, cfg: Config, phi: float | None = None) -> Policy:
    if method == "hybrid":
        return PlannerPolicy(assets.model, assets.library, cfg.planner.phi if phi is None else phi, "hybrid")
    if method == "learner_only":
        return PlannerPolicy(assets.model, assets.library, 0.0, "learner_only")
    if method == "costmap_only":
        return PlannerPolicy(assets.model, assets.library, 1.0, "costmap_only")
    if method == "bc":
        return BCPolicy(assets.bc)
    if method == "straight":
        return StraightPolicy()
    if method == "random":
        return RandomPolicy()
    if method == "oracle":
        return OraclePolicy()
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def run_specs(method, worlds, specs, assets, cfg, phi=None):
    pol = make_policy(method, assets, cfg, phi)
    return [run_episode(worlds[s.world_index], pol, s, cfg) for s in specs]


def oracle_rate(worlds, specs, assets: Assets, cfg: Config) -> float:
    key = "|".join(s.key() for s in specs) + "|" + "|".join(w.to_json() for w in worlds)
    if key not in assets.oracle_cache:
        res = run_specs("oracle", worlds, specs, assets, cfg)
        assets.oracle_cache[key] = res
    res = assets.oracle_cache[key]
    return sum(r.success for r in res) / len(res)


def evaluate(method: str, worlds, n_episodes: int, seed: int, assets: Assets | None = None,
             cfg: Config | None = None, phi: float | None = None, environment: str | None = None,
             specs=None) -> MetricsReport:
    """Success metrics for one method on seeded specs shared across methods."""
    cfg = cfg or Config()
    assets = assets or Assets()
    specs = specs if specs is not None else make_specs(worlds, n_episodes, seed, cfg)
    environment = environment or worlds[0].profile
    if method == "oracle":
        orate = oracle_rate(worlds, specs, assets, cfg)
        key = "|".join(s.key() for s in specs) + "|" + "|".join(w.to_json() for w in worlds)
        return summarize("oracle", None, environment, assets.oracle_cache[key], orate)
    res = run_specs(method, worlds, specs, assets, cfg, phi)
    orate = oracle_rate(worlds, specs, assets, cfg)
    rep_phi = {"hybrid": cfg.planner.phi if phi is None else phi, "learner_only": 0.0,
               "costmap_only": 1.0}.get(method)
    return summarize(method, rep_phi, environment, res, orate)


@dataclass
class SweepReport:
    values: list
    reports: list

    def csv(self) -> str:
        buf = io.StringIO()
        buf.write("phi,raw_rate,normalized_rate,ci\n")
        for v, r in zip(self.values, self.reports):
            buf.write(f"{v:.2f},{r.raw_rate:.4f},{r.normalized_rate:.4f},{r.ci:.4f}\n")
        return buf.getvalue()

    @property
    def best_phi(self) -> float:
        rates = [r.raw_rate for r in self.reports]
        return self.values[int(np.argmax(rates))]


def sweep_phi(values, worlds, n: int, seed: int, assets: Assets, cfg: Config | None = None,
              specs=None, cache: dict | None = None) -> SweepReport:
    """Hybrid at every phi on shared specs. ``cache`` maps phi to an existing
    report so endpoints evaluated elsewhere are not re-run."""
    cfg = cfg or Config()
    values = [float(v) for v in values]
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ValueError("phi values must lie in [0, 1]")
    specs = specs if specs is not None else make_specs(worlds, n, seed, cfg)
    reps = []
    for v in values:
        if cache is not None and v in cache:
            reps.append(cache[v])
            continue
        r = evaluate("hybrid", worlds, n, seed, assets, cfg, phi=v, specs=specs)
        reps.append(r)
    return SweepReport(values, reps)


def ablate_channels(dataset, modes, worlds, n: int, seed: int, assets: Assets, cfg: Config | None = None,
                    specs=None, trained: dict | None = None, log=None):
    """Retrain the learner per channel mask and evaluate learner_only on shared
    specs. ``trained`` may supply already-fitted models keyed by mode."""
    cfg = cfg or Config()
    specs = specs if specs is not None else make_specs(worlds, n, seed, cfg)
    out = []
    models = {}
    for mode in modes:
        if mode not in MASKS:
            raise ValueError(f"unknown channel mode {mode!r}")
        if trained is not None and mode in trained:
            m = trained[mode]
        else:
            tcfg = replace(cfg.train, seed=stage_seed(cfg.master_seed, "train"))
            m, _ = imitative.train(dataset, tcfg, cfg.model, channel_mask=MASKS[mode], log=log)
        models[mode] = m
        a = Assets(m, assets.library, assets.bc, assets.oracle_cache)
        r = evaluate("learner_only", worlds, n, seed, a, cfg, specs=specs)
        r.method = f"learner_only[{mode}]"
        out.append(r)
    return out, models


def train_bc(dataset, cfg: Config | None = None, log=None):
    cfg = cfg or Config()
    tcfg = replace(cfg.train, seed=stage_seed(cfg.master_seed, "bc"))
    return baselines.train_bc(dataset, tcfg, cfg.model, log=log)


def planner_config(cfg: Config, phi: float) -> PlannerConfig:
    return replace(cfg.planner, phi=phi)

