"""Run the full master-seed benchmark and print the comparison tables.

    python scripts/run_benchmark.py --run-dir runs/bench [--config c.json] [--set key=value ...]

The run directory can then be handed to the acceptance suite:

    HIPNAV_ACCEPTANCE_RUN=runs/bench pytest tests/test_acceptance.py
"""

import argparse
import sys
import time

from hipnav import pipeline
from hipnav.config import load_config


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--run-dir", default="runs/bench")
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--no-ablate", action="store_true")
    args = ap.parse_args(argv)
    cfg = load_config(args.config, dict(kv.split("=", 1) for kv in args.set))

    t0 = time.perf_counter()
    res = pipeline.run_pipeline(cfg, args.run_dir, log=lambda m: print(m, flush=True), ablate=not args.no_ablate)
    total = time.perf_counter() - t0

    print("\nmethod          ID raw  ID norm  OOD raw")
    for m in pipeline.EVAL_METHODS:
        a, b = res.id_reports[m], res.ood_reports[m]
        print(f"{m:14s} {a.raw_rate:7.2f} {a.normalized_rate:8.2f} {b.raw_rate:8.2f}")
    print("\nphi sweep: " + ", ".join(f"{p:g}:{r.raw_rate:.2f}" for p, r in zip(res.sweep.values, res.sweep.reports)))
    for r in res.ablation:
        print(f"{r.method}: {r.raw_rate:.2f}")
    print(f"\ntotal {total / 60:.1f} min; outputs in {args.run_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
