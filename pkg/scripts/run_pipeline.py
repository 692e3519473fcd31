"""Build the toy world: datasets, oracles, and the prior / GRF / no-GRF restoration models.

Usage: python3 scripts/run_pipeline.py [--config cfg.json] [--root DIR]
"""

import argparse
import json
import logging
import time

from agerestore import pipeline
from agerestore.config import AppConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--root")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = AppConfig.load(args.config) if args.config else AppConfig()
    if args.root:
        cfg.root = args.root
    t0 = time.time()
    manifests = pipeline.prepare_data(cfg)
    _, encoder, report = pipeline.prepare_oracles(cfg)
    print("oracles", json.dumps(report, sort_keys=True))
    paths = pipeline.train_models(cfg, encoder, manifests)
    print("checkpoints", json.dumps(paths, indent=1))
    print(f"done in {(time.time() - t0) / 60:.1f} min")


if __name__ == "__main__":
    main()
