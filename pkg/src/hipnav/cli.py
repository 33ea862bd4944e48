"""Command-line entry point.

Every subcommand writes into ``--run-dir`` and records its outputs (with
sha256 digests and the effective config) in ``manifest.json`` there.
Failures exit nonzero after printing one machine-readable line to stderr:

    error: {"code": "...", "command": "...", "message": "..."}
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import baselines, datakit, evalbench, geomcost, imitative, pipeline, plots, planner
from .config import Config, ConfigError, load_config, stage_seed
from .fileio import SchemaError
from .worldsim import PROFILES, RobotState, generate_world, load_world, observe, raycast_lidar, save_world


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- helpers


def _floats(text: str, n: int | None = None, name: str = "value") -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{name}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise UsageError(f"{name}: expected {n} numbers, got {len(vals)}")
    return vals


def _pose(text: str) -> RobotState:
    x, y, h = _floats(text, 3, "--pose")
    return RobotState(x, y, h)


_RUN_DIR: Path | None = None


def _need(path, what: str) -> Path:
    """Existing input file; relative paths fall back to the run directory."""
    p = Path(path)
    if not p.exists() and not p.is_absolute() and _RUN_DIR is not None and (_RUN_DIR / p).exists():
        p = _RUN_DIR / p
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


class Run:
    """Output bookkeeping for one subcommand invocation."""

    def __init__(self, run_dir, command: str, args: dict, cfg: Config):
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command, self.args, self.cfg = command, args, cfg
        self.outputs: list[Path] = []

    def path(self, name) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.dir / p

    def wrote(self, p: Path) -> Path:
        self.outputs.append(p)
        return p

    def finish(self):
        mpath = self.dir / "manifest.json"
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
        manifest.setdefault("commands", {})
        manifest["commands"][self.command] = {
            "args": self.args,
            "config": self.cfg.to_dict(),
            "outputs": {str(p): hashlib.sha256(p.read_bytes()).hexdigest() for p in self.outputs},
        }
        mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _header(cfg: Config, **extra) -> dict:
    h = {"config": cfg.to_dict()}
    h.update(extra)
    return h


def _eval_worlds(args, cfg: Config):
    if args.worlds:
        return [load_world(_need(w, "world file")) for w in args.worlds]
    return pipeline.eval_worlds(cfg, args.profile)


def _assets(args) -> evalbench.Assets:
    model = imitative.load_model(_need(args.model, "model")) if args.model else None
    lib = datakit.load_library(_need(args.library, "library")) if args.library else None
    bc = baselines.load_bc(_need(args.bc, "bc model")) if getattr(args, "bc", None) else None
    return evalbench.Assets(model, lib, bc)


def _require(assets: evalbench.Assets, method: str, phi: float | None):
    if method in ("hybrid", "learner_only", "costmap_only") and assets.library is None:
        raise UsageError(f"method {method} needs --library")
    uses_model = method == "learner_only" or (method == "hybrid" and (phi is None or phi < 1.0))
    if uses_model and assets.model is None:
        raise UsageError(f"method {method} needs --model")
    if method == "bc" and assets.bc is None:
        raise UsageError("method bc needs --bc")


# ---------------------------------------------------------------- commands


def cmd_gen_world(args, cfg, run):
    extent = _floats(args.extent, None, "--extent") if args.extent else cfg.world.extent
    if len(extent) == 1:
        extent = (extent[0], extent[0])
    w = generate_world(args.seed, tuple(extent), args.profile, cfg.world)
    save_world(run.wrote(run.path(args.out)), w)
    return f"{len(w.obstacles)} obstacles"


def cmd_collect(args, cfg, run):
    w = load_world(_need(args.world, "world file"))
    seed = args.seed if args.seed is not None else stage_seed(cfg.master_seed, "collect")
    log = datakit.collect(w, args.steps or cfg.data.steps_per_world, seed, cfg.data, cfg.sim)
    datakit.save_log(run.wrote(run.path(args.out)), log, _header(cfg))
    return f"{len(log)} steps, {len(log.collisions)} collision events"


def cmd_make_dataset(args, cfg, run):
    parts = []
    for p in args.log:
        log = datakit.load_log(_need(p, "log"))
        parts.append(datakit.make_dataset(log, cfg.data.f_traj, cfg.data, cfg.sensor, cfg.sim, cfg.model.patch_cells))
    ds = datakit.merge_datasets(parts)
    datakit.save_dataset(run.wrote(run.path(args.out)), ds, _header(cfg))
    return f"{len(ds)} examples"


def cmd_train(args, cfg, run):
    ds = datakit.load_dataset(_need(args.dataset, "dataset"))
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    seed = args.seed if args.seed is not None else stage_seed(cfg.master_seed, "train")
    cfg.train.seed = seed
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    if args.bc:
        m, losses = baselines.train_bc(ds, cfg.train, cfg.model, evalbench.MASKS[args.mode], log=log)
        baselines.save_bc(run.wrote(run.path(args.out)), m, _header(cfg, mode=args.mode))
    else:
        m, losses = imitative.train(ds, cfg.train, cfg.model, channel_mask=evalbench.MASKS[args.mode], log=log)
        imitative.save_model(run.wrote(run.path(args.out)), m, _header(cfg, mode=args.mode))
    return f"final loss {losses[-1]:.4f}"


def cmd_build_library(args, cfg, run):
    ds = datakit.load_dataset(_need(args.dataset, "dataset"))
    K = args.k or cfg.data.library_size
    seed = args.seed if args.seed is not None else stage_seed(cfg.master_seed, "library")
    lib = datakit.build_library(ds, K, seed, cfg.data.kmeans_iters)
    datakit.save_library(run.wrote(run.path(args.out)), lib, _header(cfg))
    return f"K={lib.K}"


def cmd_costmap(args, cfg, run):
    w = load_world(_need(args.world, "world file"))
    pose = _pose(args.pose)
    raw = geomcost.build_raw(raycast_lidar(w, pose, cfg.sensor), pose, cfg.costmap)
    text = geomcost.dump_pgm(raw, {"world_seed": w.seed, "costmap": cfg.to_dict()["costmap"]})
    out = run.wrote(run.path(args.out))
    out.write_text(text)
    return f"{int((raw.cells == geomcost.LETHAL).sum())} lethal cells"


def cmd_plan(args, cfg, run):
    w = load_world(_need(args.world, "world file"))
    pose = _pose(args.pose)
    goal = _floats(args.goal, 2, "--goal")
    if args.phi is not None:
        cfg.planner.phi = args.phi
    assets = _assets(args)
    _require(assets, "hybrid", cfg.planner.phi)
    history = np.array([[pose.x, pose.y]])
    obs = observe(w, pose, history, args.noise_seed, cfg.sensor, cfg.data.past)
    cmap = geomcost.costmap_from_scan(obs.pointcloud, pose, cfg.costmap, cfg.alpha) if cfg.planner.phi > 0 else None
    p = planner.plan(assets.library, assets.model, cmap, obs, goal, cfg.planner)
    out = run.wrote(run.path(args.out))
    out.write_text(p.to_csv())
    return f"chosen candidate {p.index}, total {p.breakdown.total[p.index]:.4f}"


def _episode_setup(args, cfg):
    if args.episodes is not None:
        cfg.eval.n_episodes = args.episodes
    worlds = _eval_worlds(args, cfg)
    seed = args.seed if args.seed is not None else pipeline.episode_seed(cfg, args.profile)
    specs = evalbench.make_specs(worlds, cfg.eval.n_episodes, seed, cfg)
    return worlds, specs, seed


def cmd_eval(args, cfg, run):
    worlds, specs, seed = _episode_setup(args, cfg)
    assets = _assets(args)
    reps = []
    for m in args.method:
        _require(assets, m, args.phi)
        reps.append(evalbench.evaluate(m, worlds, cfg.eval.n_episodes, seed, assets, cfg, phi=args.phi,
                                       specs=specs, environment=args.profile))
    out = run.wrote(run.path(args.out))
    out.write_text(evalbench.reports_csv(reps))
    return "; ".join(f"{r.method} {r.raw_rate:.2f}" for r in reps)


def cmd_sweep(args, cfg, run):
    worlds, specs, seed = _episode_setup(args, cfg)
    assets = _assets(args)
    phis = _floats(args.phis, None, "--phis") if args.phis else cfg.eval.phis
    for v in phis:
        _require(assets, "hybrid", v)
    rep = evalbench.sweep_phi(phis, worlds, cfg.eval.n_episodes, seed, assets, cfg, specs=specs)
    out = run.wrote(run.path(args.out))
    out.write_text(rep.csv())
    return f"best phi {rep.best_phi:.2f}"


def cmd_ablate(args, cfg, run):
    worlds, specs, seed = _episode_setup(args, cfg)
    ds = datakit.load_dataset(_need(args.dataset, "dataset"))
    assets = _assets(args)
    if assets.library is None:
        raise UsageError("ablate needs --library")
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    modes = args.modes.split(",")
    for mode in modes:
        if mode not in evalbench.MASKS:
            raise UsageError(f"unknown channel mode {mode!r}; choose from {', '.join(evalbench.MASKS)}")
    reps, _ = evalbench.ablate_channels(ds, modes, worlds, cfg.eval.n_episodes, seed, assets, cfg, specs=specs)
    out = run.wrote(run.path(args.out))
    out.write_text(evalbench.reports_csv(reps))
    return "; ".join(f"{r.method} {r.raw_rate:.2f}" for r in reps)


def cmd_plot(args, cfg, run):
    text = _need(args.csv, "CSV").read_text()
    svg = plots.plot_csv(text, title=args.title, rate=args.rate)
    out = run.wrote(run.path(args.out or Path(args.csv).with_suffix(".svg").name))
    out.write_text(svg)
    return str(out)


def cmd_grad_check(args, cfg, run):
    worst = 0.0
    t_max = 0.0
    for s in range(args.seed, args.seed + args.count):
        t = time.perf_counter()
        err = imitative.grad_check(*imitative.random_check_case(s))
        t_max = max(t_max, time.perf_counter() - t)
        worst = max(worst, err)
    out = run.wrote(run.path(args.out))
    out.write_text(json.dumps({"max_relative_error": worst, "max_seconds": t_max, "count": args.count}) + "\n")
    if worst >= args.tol:
        raise GradCheckFailed(f"max relative error {worst:.3e} >= {args.tol:.1e}")
    return f"max relative error {worst:.3e}"


class GradCheckFailed(RuntimeError):
    pass


def cmd_pipeline(args, cfg, run):
    res = pipeline.run_pipeline(cfg, run.dir, log=(lambda m: print(m, file=sys.stderr)), ablate=not args.no_ablate)
    run.outputs.extend(run.dir / f for f in pipeline.RESULT_FILES if (run.dir / f).exists())
    return f"hybrid {res.rate('hybrid'):.2f} (in-distribution)"


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hipnav", description="Hybrid imitative planning toolkit")
    ap.add_argument("--config", help="JSON config file (layered over defaults)")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="dotted config override, e.g. planner.phi=0.5 (repeatable)")
    ap.add_argument("--run-dir", default="runs/default", help="directory for outputs and manifest.json")
    ap.add_argument("--master-seed", type=int, help="shortcut for --set master_seed=N")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate a seeded world")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--extent", help="W,H in metres (or one number for a square)")
    p.add_argument("--profile", choices=PROFILES, default="in_distribution")
    p.add_argument("--out", default="world.json")
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("collect", help="random sticky-action driving log")
    p.add_argument("--world", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="log.bin")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("make-dataset", help="cut training examples from logs")
    p.add_argument("--log", action="append", required=True)
    p.add_argument("--out", default="dataset.bin")
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", help="fit the trajectory density (or BC with --bc)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=list(evalbench.MASKS), default="appearance+height")
    p.add_argument("--bc", action="store_true", help="train the behaviour-cloning baseline instead")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", default="model.bin")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-library", help="k-means trajectory library")
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="library.bin")
    p.set_defaults(func=cmd_build_library)

    p = sub.add_parser("costmap", help="dump the raw costmap at a pose as PGM")
    p.add_argument("--world", required=True)
    p.add_argument("--pose", required=True, help="x,y,heading")
    p.add_argument("--out", default="costmap.pgm")
    p.set_defaults(func=cmd_costmap)

    p = sub.add_parser("plan", help="one planning step; writes the per-candidate breakdown")
    p.add_argument("--world", required=True)
    p.add_argument("--pose", required=True, help="x,y,heading")
    p.add_argument("--goal", required=True, help="x,y")
    p.add_argument("--model")
    p.add_argument("--library", required=True)
    p.add_argument("--phi", type=float)
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--out", default="plan.csv")
    p.set_defaults(func=cmd_plan)

    def episode_args(p):
        p.add_argument("--profile", choices=PROFILES, default="in_distribution")
        p.add_argument("--worlds", nargs="*", help="world files (default: seeded evaluation worlds)")
        p.add_argument("--episodes", type=int)
        p.add_argument("--seed", type=int, help="episode seed (default: from the master seed)")
        p.add_argument("--model")
        p.add_argument("--library")

    p = sub.add_parser("eval", help="success metrics on seeded episodes")
    episode_args(p)
    p.add_argument("--method", action="append", choices=evalbench.METHODS, required=True)
    p.add_argument("--phi", type=float)
    p.add_argument("--bc")
    p.add_argument("--out", default="report.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="hybrid success over phi values")
    episode_args(p)
    p.add_argument("--phis", help="comma-separated phi values")
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="retrain per channel mask and evaluate learner_only")
    episode_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--modes", default="appearance+height,appearance,height")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default="ablation.csv")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="SVG chart for a report, sweep or plan CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--title")
    p.add_argument("--rate", choices=("raw_rate", "normalized_rate"), default="raw_rate")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("grad-check", help="analytic vs finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", default="grad_check.json")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("pipeline", help="full master-seed recipe into --run-dir")
    p.add_argument("--no-ablate", action="store_true")
    p.set_defaults(func=cmd_pipeline)
    return ap


def _overrides(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


ERROR_CODES = (
    (UsageError, "usage", 2),
    (ConfigError, "config", 2),
    (SchemaError, "schema", 3),
    (FileNotFoundError, "missing_input", 4),
    (GradCheckFailed, "grad_check_failed", 5),
    (ValueError, "invalid_value", 2),
)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        # argparse already printed usage; add the machine-readable line
        if e.code:
            print("error: " + json.dumps({"code": "usage", "command": None,
                                          "message": "invalid command line"}), file=sys.stderr)
        return int(e.code or 0)
    try:
        overrides = _overrides(args.set)
        if args.master_seed is not None:
            overrides["master_seed"] = args.master_seed
        cfg = load_config(args.config, overrides)
        flags = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
        run = Run(args.run_dir, args.command, flags, cfg)
        global _RUN_DIR
        _RUN_DIR = run.dir
        msg = args.func(args, cfg, run)
        run.finish()
    except Exception as e:
        for cls, code, status in ERROR_CODES:
            if isinstance(e, cls):
                break
        else:
            code, status = "internal", 1
        print("error: " + json.dumps({"code": code, "command": args.command, "message": str(e)}),
              file=sys.stderr)
        return status
    if msg:
        print(f"{args.command}: {msg}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
