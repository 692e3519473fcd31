"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 failed acceptance gate, 3 runtime failure.
Environment: ``AGERESTORE_ROOT`` overrides the workspace root, ``AGERESTORE_THREADS`` sets
the torch thread count.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np
import torch

log = logging.getLogger("agerestore")

EXIT_OK, EXIT_USAGE, EXIT_GATE, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="agerestore", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON config file (defaults are used when omitted)")
    p.add_argument("--root", help="workspace root (overrides config and AGERESTORE_ROOT)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="render the synthetic datasets")
    s.add_argument("--split", default="all",
                   choices=["all", "train_same_age", "test_same_age", "test_cross_age", "gap_buckets",
                            "val_cross_age"],
                   help="which dataset to render (default: all)")

    sub.add_parser("train-oracles", help="train the age/identity oracles and face encoder, then gate them")

    s = sub.add_parser("train", help="train the prior and identity stages")
    s.add_argument("--no-grf", action="store_true", help="additive fusion instead of gated fusion")
    s.add_argument("--stage", choices=["all", "prior", "identity"], default="all", help="stages to run")

    s = sub.add_parser("degrade", help="apply the synthetic degradation to image files")
    s.add_argument("inputs", nargs="+", help="grayscale PNG files")
    s.add_argument("--out-dir", required=True, help="directory for degraded images and their parameters")
    s.add_argument("--seed", type=int, default=0, help="seed for parameters and noise")
    s.add_argument("--full-ranges", action="store_true", help="sample from the full-size ranges")

    s = sub.add_parser("restore", help="restore every record of a split")
    s.add_argument("--split", default="test_cross_age", help="dataset name (default: test_cross_age)")
    s.add_argument("--out", default=None, help="output directory name under <root>/outputs")
    s.add_argument("--target-age", type=float, default=None, help="target age (default: ground-truth age)")
    s.add_argument("--inner-steps", type=int, default=None, help="guidance corrections per step")
    s.add_argument("--modulation", default=None, help="'sqrt' or 'fixed:S' with S in [0, 1]")
    s.add_argument("--step-scale", type=float, default=None, help="guidance step scale")
    s.add_argument("--prompt-only", action="store_true", help="no guidance corrections (N = 0)")
    s.add_argument("--null-guidance", action="store_true", help="use the age prompt as source prompt too")
    s.add_argument("--grad-through-net", action="store_true", help="differentiate the residual through the net")
    s.add_argument("--no-negatives", action="store_true", help="do not append negative descriptors")
    s.add_argument("--seed", type=int, default=None, help="sampling seed")
    s.add_argument("--limit", type=int, default=None, help="only the first K records")
    s.add_argument("--variant", choices=["grf", "no_grf"], default="grf", help="trained model variant")

    s = sub.add_parser("eval", help="score a restoration output directory")
    s.add_argument("--split", default="test_cross_age", help="dataset the outputs belong to")
    s.add_argument("--outputs", required=True, help="directory name under <root>/outputs, or a path")
    s.add_argument("--limit", type=int, default=None, help="only the first K records")

    s = sub.add_parser("ablate", help="run an ablation sweep")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--table", choices=["2", "3", "4"], help="2: age gaps, 3: inference method, 4: fusion")
    g.add_argument("--figure", choices=["10", "a", "heatmap"],
                   help="10: modulation scales, a: inner steps, heatmap: attention stability")
    s.add_argument("--limit", type=int, default=None, help="only the first K records")
    return p


def load_config(args):
    from .config import AppConfig

    cfg = AppConfig.load(args.config) if args.config else AppConfig()
    root = args.root or os.environ.get("AGERESTORE_ROOT")
    if root:
        cfg.root = root
    if args.config and not os.path.isabs(cfg.root) and not args.root:
        cfg.root = os.path.join(os.path.dirname(os.path.abspath(args.config)), cfg.root)
    return cfg


def cmd_synth_data(cfg, args) -> int:
    from . import pipeline

    manifests = pipeline.prepare_data(cfg)
    for name, m in manifests.items():
        if args.split in ("all", name):
            log.info("%s: %d records", name, len(m.records))
    return EXIT_OK


def cmd_train_oracles(cfg, args) -> int:
    from . import pipeline

    _, _, report = pipeline.prepare_oracles(cfg)
    log.info("oracle report written to %s", cfg.path("oracles.json"))
    for k, v in report.items():
        if k != "gates":
            log.info("  %s: %s", k, v)
    return EXIT_OK if report["passed"] else EXIT_GATE


def cmd_train(cfg, args) -> int:
    from . import pipeline

    manifests = pipeline.prepare_data(cfg)
    _, encoder, _ = pipeline.prepare_oracles(cfg)
    variants = () if args.stage == "prior" else (("no_grf",) if args.no_grf else ("grf",))
    paths = pipeline.train_models(cfg, encoder, manifests, variants)
    for k, v in paths.items():
        log.info("%s checkpoint: %s", k, v)
    return EXIT_OK


def cmd_degrade(cfg, args) -> int:
    from . import synthface as sf
    from .degrade import apply_degradation, sample_degradation_params
    from .training import TOY_DEGRADATION

    missing = [p for p in args.inputs if not os.path.exists(p)]
    if missing:
        raise FileNotFoundError(", ".join(missing))
    os.makedirs(args.out_dir, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    params = {}
    for path in args.inputs:
        p = sample_degradation_params(rng, None if args.full_ranges else TOY_DEGRADATION)
        noise_seed = int(rng.integers(0, 2**31 - 1))
        out = np.round(apply_degradation(sf.load_png(path), p, seed=noise_seed)).astype(np.uint8)
        name = os.path.basename(path)
        sf.save_png(os.path.join(args.out_dir, name), out)
        params[name] = dict(p.to_dict(), noise_seed=noise_seed)
    sf._atomic_write(os.path.join(args.out_dir, "degradation.json"), json.dumps(params, indent=1, sort_keys=True))
    return EXIT_OK


def _guidance(cfg, args):
    from .guidance import parse_modulation

    g = cfg.guidance
    kw = {}
    if args.target_age is not None:
        kw["target_age"] = args.target_age
    if args.inner_steps is not None:
        kw["inner_steps"] = args.inner_steps
    if args.prompt_only:
        kw["inner_steps"] = 0
    if args.modulation:
        kw["modulation"], kw["fixed_scale"] = parse_modulation(args.modulation)
    if args.step_scale is not None:
        kw["step_scale"] = args.step_scale
    if args.null_guidance:
        kw["source_prompt"] = "target"
    if args.grad_through_net:
        kw["grad_through_net"] = True
    if args.no_negatives:
        kw["negative_descriptors"] = False
    if args.seed is not None:
        kw["seed"] = args.seed
    return replace(g, **kw)


def cmd_restore(cfg, args) -> int:
    from . import pipeline
    from .ablations import subset
    from . import synthface as sf

    manifests = pipeline.prepare_data(cfg)
    if args.split not in manifests:
        raise UsageError(f"unknown split {args.split!r}")
    manifest = subset(manifests[args.split], args.limit)
    gcfg = _guidance(cfg, args)
    model, ckpt = pipeline.load_model(cfg, args.variant)
    out_dir = cfg.path("outputs", args.out or f"restore_{args.split}")
    ages = [gcfg.target_age] * len(manifest.records) if args.target_age is not None else None
    pipeline.restore_manifest(model, manifest, gcfg, out_dir, target_ages=ages)
    run = {"config": cfg.to_dict(), "config_hash": cfg.digest(), "guidance": gcfg.to_dict(), "checkpoint": ckpt,
           "split": args.split, "records": len(manifest.records)}
    sf._atomic_write(os.path.join(out_dir, "run.json"), json.dumps(run, indent=1, sort_keys=True))
    log.info("restored %d records into %s", len(manifest.records), out_dir)
    return EXIT_OK


def cmd_eval(cfg, args) -> int:
    from . import pipeline
    from .ablations import subset
    from .evaluation import evaluate_run, render_table

    manifests = pipeline.prepare_data(cfg)
    manifest = subset(manifests[args.split], args.limit)
    oracles, _, _ = pipeline.prepare_oracles(cfg)
    out_dir = args.outputs if os.path.isdir(args.outputs) else cfg.path("outputs", args.outputs)
    config = {}
    run_path = os.path.join(out_dir, "run.json")
    if os.path.exists(run_path):
        with open(run_path) as fh:
            run = json.load(fh)
        # root-independent parts only, so reports from different workspaces compare equal
        config = {k: run[k] for k in ("config_hash", "guidance", "split", "records")}
    report = evaluate_run(manifest, out_dir, oracles, config=config, out_path=os.path.join(out_dir, "report.json"))
    rows = {"all": report["aggregate"], **report.get("buckets", {})}
    print(render_table(rows), file=sys.stderr)
    return EXIT_OK


def cmd_ablate(cfg, args) -> int:
    from . import ablations as ab
    from . import pipeline

    manifests = pipeline.prepare_data(cfg)
    oracles, encoder, _ = pipeline.prepare_oracles(cfg)
    if args.table == "4":
        pipeline.train_models(cfg, encoder, manifests)
        models = {k: (pipeline.load_model(cfg, k)[0], k) for k in ("grf", "no_grf")}
        out = ab.fusion(cfg, models, manifests["test_same_age"], oracles, args.limit)
    else:
        pipeline.train_models(cfg, encoder, manifests, ("grf",))
        model, _ = pipeline.load_model(cfg, "grf")
        if args.table == "3":
            out = ab.inference_methods(cfg, model, "grf", manifests["test_cross_age"], oracles, args.limit)
        elif args.table == "2":
            out = ab.age_gaps(cfg, model, "grf", ab.subset(manifests["gap_buckets"], args.limit), oracles)
        elif args.figure == "10":
            out = ab.modulation_grid(cfg, model, "grf", manifests["test_cross_age"], oracles, args.limit)
        elif args.figure == "a":
            out = ab.inner_steps(cfg, model, "grf", manifests["test_cross_age"], oracles, args.limit)
        else:
            out = {"rows": {}, **ab.heatmap_stability(cfg, model)}
            from . import synthface as sf

            os.makedirs(cfg.path("ablations"), exist_ok=True)
            sf._atomic_write(cfg.path("ablations", "heatmap.json"), json.dumps(out, indent=1, sort_keys=True))
    if out.get("rows"):
        from .evaluation import render_table

        print(render_table(out["rows"]), file=sys.stderr)
    return EXIT_OK


COMMANDS = {"synth-data": cmd_synth_data, "train-oracles": cmd_train_oracles, "train": cmd_train,
            "degrade": cmd_degrade, "restore": cmd_restore, "eval": cmd_eval, "ablate": cmd_ablate}


def run_command(argv: list[str] | None = None) -> int:
    from .config import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("AGERESTORE_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to one exit code
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
