"""Run every ablation sweep on a built toy world and print the tables.

Usage: python3 scripts/run_ablations.py --root DIR [--only table3 figure10 ...] [--limit K]
"""

import argparse
import json
import logging

from agerestore import ablations, pipeline
from agerestore.config import AppConfig
from agerestore.evaluation import render_table

SWEEPS = ("table2", "table3", "table4", "figure10", "figure_a", "heatmap")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--root")
    ap.add_argument("--only", nargs="+", choices=SWEEPS, default=list(SWEEPS))
    ap.add_argument("--limit", type=int, default=None, help="records per split for the subset sweeps")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = AppConfig.load(args.config) if args.config else AppConfig()
    if args.root:
        cfg.root = args.root
    manifests = pipeline.prepare_data(cfg)
    oracles, _, _ = pipeline.prepare_oracles(cfg)
    grf = pipeline.load_model(cfg, "grf")
    cross = manifests["test_cross_age"]
    for name in args.only:
        if name == "table2":
            out = ablations.age_gaps(cfg, *grf, manifests["gap_buckets"], oracles)
        elif name == "table3":
            out = ablations.inference_methods(cfg, *grf, cross, oracles, args.limit)
        elif name == "table4":
            models = {"grf": grf, "no_grf": pipeline.load_model(cfg, "no_grf")}
            out = ablations.fusion(cfg, models, manifests["test_same_age"], oracles, args.limit)
        elif name == "figure10":
            out = ablations.modulation_grid(cfg, *grf, cross, oracles, args.limit or 16)
        elif name == "figure_a":
            out = ablations.inner_steps(cfg, *grf, cross, oracles, args.limit)
        else:
            print(name, json.dumps(ablations.heatmap_stability(cfg, grf[0]), indent=1))
            continue
        print(f"== {name}")
        print(render_table(out["rows"]))
        extra = {k: v for k, v in out.items() if k != "rows"}
        if extra:
            print(json.dumps(extra, indent=1))


if __name__ == "__main__":
    main()
