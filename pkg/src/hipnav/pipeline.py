"""End-to-end recipe from one master seed.

gen-world -> collect -> make-dataset -> train -> build-library -> train-bc
-> eval (in- and out-of-distribution; costmap planners again under the other
normalization mode) -> phi sweep -> channel ablation -> plots

Every stage writes a versioned artifact into the run directory; the metric
CSVs depend only on the config (including the master seed), so two runs with
the same config produce byte-identical CSVs.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import baselines, datakit, evalbench, imitative, plots
from .config import Config, stage_seed
from .worldsim import generate_world, save_world

RESULT_FILES = ("results_id.csv", "results_ood.csv", "results_costmap_mode.csv", "sweep.csv", "ablation.csv",
                "episodes.csv")
EVAL_METHODS = ("oracle", "hybrid", "learner_only", "costmap_only", "bc", "straight", "random")
ABLATION_MODES = ("appearance+height", "appearance", "height")


def training_worlds(cfg: Config):
    return [generate_world(stage_seed(cfg.master_seed, "world", i), cfg.world.extent, "in_distribution", cfg.world)
            for i in range(cfg.data.n_worlds)]


def eval_worlds(cfg: Config, profile: str):
    stage = "eval_world" if profile == "in_distribution" else "world_ood"
    return [generate_world(stage_seed(cfg.master_seed, stage, i), cfg.world.extent, profile, cfg.world)
            for i in range(cfg.eval.n_worlds)]


def episode_seed(cfg: Config, profile: str) -> int:
    return stage_seed(cfg.master_seed, "episodes", 0 if profile == "in_distribution" else 1)


def build_dataset(cfg: Config, worlds=None, log=None) -> datakit.Dataset:
    worlds = worlds if worlds is not None else training_worlds(cfg)
    parts = []
    for i, w in enumerate(worlds):
        raw = datakit.collect(w, cfg.data.steps_per_world, stage_seed(cfg.master_seed, "collect", i),
                              cfg.data, cfg.sim)
        parts.append(datakit.make_dataset(raw, cfg.data.f_traj, cfg.data, cfg.sensor, cfg.sim,
                                          cfg.model.patch_cells))
        if log:
            log(f"world {i}: {len(raw)} steps, {len(raw.collisions)} events, {len(parts[-1])} examples")
    return datakit.merge_datasets(parts)


def train_learner(dataset, cfg: Config, mode: str = "appearance+height", log=None):
    tcfg = replace(cfg.train, seed=stage_seed(cfg.master_seed, "train"))
    model, losses = imitative.train(dataset, tcfg, cfg.model, channel_mask=evalbench.MASKS[mode], log=log)
    model.meta.update({"mode": mode, "final_loss": losses[-1] if losses else None})
    return model


def episodes_csv(reports) -> str:
    lines = ["method,phi,environment,episode,world,outcome,kind,path_length,elapsed"]
    for r in reports:
        phi = "" if r.phi is None else f"{r.phi:.2f}"
        for i, e in enumerate(r.results):
            lines.append(f"{r.method},{phi},{r.environment},{i},{e.world_index},{e.outcome},"
                         f"{e.kind or ''},{e.path_length:.4f},{e.elapsed:.4f}")
    return "\n".join(lines) + "\n"


@dataclass
class PipelineResult:
    run_dir: Path
    id_reports: dict
    ood_reports: dict
    sweep: evalbench.SweepReport
    ablation: list
    timings: dict = field(default_factory=dict)

    def rate(self, method: str, environment: str = "in_distribution") -> float:
        reps = self.id_reports if environment == "in_distribution" else self.ood_reports
        return reps[method].raw_rate

    def ablation_rate(self, mode: str) -> float:
        for r in self.ablation:
            if r.method == f"learner_only[{mode}]":
                return r.raw_rate
        raise KeyError(mode)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_pipeline(cfg: Config, run_dir, log=None, ablate: bool = True) -> PipelineResult:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    say = log or (lambda msg: None)
    timings: dict = {}
    header = {"config": cfg.to_dict()}

    def stage(name):
        timings[name] = time.perf_counter()

    def done(name):
        timings[name] = round(time.perf_counter() - timings[name], 3)
        say(f"[{name}] {timings[name]:.1f}s")

    stage("data")
    worlds = training_worlds(cfg)
    for i, w in enumerate(worlds):
        save_world(run_dir / f"world_{i:02d}.json", w)
    ds = build_dataset(cfg, worlds, log=say)
    datakit.save_dataset(run_dir / "dataset.bin", ds, header)
    done("data")

    stage("train")
    model = train_learner(ds, cfg, log=say)
    imitative.save_model(run_dir / "model.bin", model, header)
    done("train")

    stage("library")
    lib = datakit.build_library(ds, cfg.data.library_size, stage_seed(cfg.master_seed, "library"),
                                cfg.data.kmeans_iters)
    datakit.save_library(run_dir / "library.bin", lib, header)
    done("library")

    stage("bc")
    bc, _ = evalbench.train_bc(ds, cfg, log=say)
    baselines.save_bc(run_dir / "bc.bin", bc, header)
    done("bc")

    assets = evalbench.Assets(model, lib, bc)
    reports = {}
    all_reports = []
    for profile in ("in_distribution", "out_of_distribution"):
        stage(f"eval_{profile}")
        ws = eval_worlds(cfg, profile)
        specs = evalbench.make_specs(ws, cfg.eval.n_episodes, episode_seed(cfg, profile), cfg)
        reps = {}
        for m in EVAL_METHODS:
            reps[m] = evalbench.evaluate(m, ws, cfg.eval.n_episodes, 0, assets, cfg, specs=specs,
                                         environment=profile)
            say(f"  {reps[m].row()}")
        reports[profile] = (ws, specs, reps)
        all_reports.extend(reps.values())
        done(f"eval_{profile}")
    ws, specs, id_reps = reports["in_distribution"]
    _, _, ood_reps = reports["out_of_distribution"]
    (run_dir / "results_id.csv").write_text(evalbench.reports_csv([id_reps[m] for m in EVAL_METHODS]))
    (run_dir / "results_ood.csv").write_text(evalbench.reports_csv([ood_reps[m] for m in EVAL_METHODS]))

    if cfg.eval.report_softmax:
        # the same costmap-using planners under the other normalization mode
        stage("costmap_mode")
        other = "global_softmax" if cfg.costmap.mode == "cellwise" else "cellwise"
        alt = copy.deepcopy(cfg)
        alt.costmap.mode = other
        mode_reps = []
        for m in ("hybrid", "costmap_only"):
            r = evalbench.evaluate(m, ws, cfg.eval.n_episodes, 0, assets, alt, specs=specs,
                                   environment="in_distribution")
            r.method = f"{m}[{other}]"
            say(f"  {r.row()}")
            mode_reps.append(r)
        (run_dir / "results_costmap_mode.csv").write_text(evalbench.reports_csv(mode_reps))
        all_reports.extend(mode_reps)
        done("costmap_mode")

    stage("sweep")
    cache = {0.0: id_reps["learner_only"], 1.0: id_reps["costmap_only"], cfg.planner.phi: id_reps["hybrid"]}
    sweep = evalbench.sweep_phi(cfg.eval.phis, ws, cfg.eval.n_episodes, 0, assets, cfg, specs=specs, cache=cache)
    (run_dir / "sweep.csv").write_text(sweep.csv())
    done("sweep")

    ablation = []
    if ablate:
        stage("ablate")
        ablation, models = evalbench.ablate_channels(
            ds, ABLATION_MODES, ws, cfg.eval.n_episodes, 0, assets, cfg, specs=specs,
            trained={"appearance+height": model}, log=say)
        for mode, m in models.items():
            if mode != "appearance+height":
                imitative.save_model(run_dir / f"model_{mode}.bin", m, header)
        (run_dir / "ablation.csv").write_text(evalbench.reports_csv(ablation))
        all_reports.extend(ablation)
        done("ablate")
    (run_dir / "episodes.csv").write_text(episodes_csv(all_reports))

    for name in ("results_id", "results_ood", "results_costmap_mode", "sweep", "ablation"):
        p = run_dir / f"{name}.csv"
        if p.exists():
            (run_dir / f"{name}.svg").write_text(plots.plot_csv(p.read_text(), title=name))

    files = sorted(p.name for p in run_dir.iterdir() if p.name != "manifest.json")
    manifest = {
        "config": cfg.to_dict(),
        "stage_seeds": {s: stage_seed(cfg.master_seed, s) for s in ("world", "collect", "train", "library", "bc")},
        "dataset_size": len(ds),
        "files": {f: _sha256(run_dir / f) for f in files},
        "timings": timings,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return PipelineResult(run_dir, id_reps, ood_reps, sweep, ablation, timings)
