"""Sweep the guidance step scale on the validation cross-age split (identities disjoint from test).

Usage: python3 scripts/tune_guidance.py --root DIR [--scales 10 20 40] [--set cfg_scale=1 ...] [--limit 32]

Every run is cached under <root>/outputs, keyed by its full guidance config.
"""

import argparse
import json
import os
from dataclasses import replace

from agerestore import ablations, pipeline
from agerestore.config import AppConfig
from agerestore.evaluation import render_table, sha256_json


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--root")
    ap.add_argument("--scales", type=float, nargs="+", default=[0.0, 10.0, 20.0, 40.0, 80.0])
    ap.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE",
                    help="guidance overrides, values parsed as JSON (e.g. cfg_scale=1 modulation='\"fixed\"')")
    ap.add_argument("--inner-steps", type=int, default=None)
    ap.add_argument("--limit", type=int, default=None)
    args = ap.parse_args()
    cfg = AppConfig.load(args.config) if args.config else AppConfig()
    if args.root:
        cfg.root = args.root
    manifests = pipeline.prepare_data(cfg)
    oracles, _, _ = pipeline.prepare_oracles(cfg)
    model, tag = pipeline.load_model(cfg, "grf")
    m = ablations.subset(manifests["val_cross_age"], args.limit)
    rows = {}
    overrides = {k: json.loads(v) for k, v in (item.split("=", 1) for item in args.set)}
    base = replace(cfg.guidance, **overrides)
    if args.inner_steps is not None:
        base = replace(base, inner_steps=args.inner_steps)
    for s in args.scales:
        g = replace(base, step_scale=s)
        name = "tune_" + sha256_json(g.to_dict())[:12]
        rows[f"scale={s:g}"] = ablations.scored_run(cfg, model, tag, m, g, oracles, name)["aggregate"]
        print(name, json.dumps(overrides), f"scale={s:g}",
              json.dumps({k: rows[f"scale={s:g}"][k] for k in ("AGE", "age_signed_error", "ids", "psnr")}), flush=True)
    table = render_table(rows, ["AGE", "age_signed_error", "ids", "psnr", "ssim"])
    print(table)
    os.makedirs(cfg.path("ablations"), exist_ok=True)
    with open(cfg.path("ablations", "tune_step_scale.json"), "a") as fh:
        fh.write(json.dumps({"overrides": overrides, "rows": rows}, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
