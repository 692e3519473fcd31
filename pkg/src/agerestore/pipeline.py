"""End-to-end toy-world pipeline: data, oracles, training, restoration and scoring.

Every stage writes under ``AppConfig.root`` and is skipped when its outputs already exist
for the same config hash, so sweeps can share expensive artifacts.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import replace

import numpy as np
import torch

from . import synthface as sf
from .config import AppConfig
from .degrade import apply_degradation, sample_degradation_params
from .diffusion import make_noise_schedule
from .evaluation import Oracles, evaluate_run, output_name
from .guidance import GuidanceConfig, aagg_sample_batch
from .identity import FaceEncoder, average_embeddings, embed_batch
from .model import RestorationModel
from .oracles import AgeOracle, IdentityOracle, oracle_report, train_age_oracle, train_face_encoder, train_identity_oracle
from .training import TOY_DEGRADATION, TrainData, run_training

log = logging.getLogger(__name__)

VAL_ID_OFFSET, VAL_IDS = 10_000, 32


def _stamp_ok(path: str, key: str) -> bool:
    try:
        with open(path) as fh:
            return json.load(fh).get("key") == key
    except (OSError, ValueError):
        return False


def _write_stamp(path: str, key: str, **extra) -> None:
    sf._atomic_write(path, json.dumps({"key": key, **extra}, sort_keys=True, indent=1))


def _key(*parts) -> str:
    from .evaluation import sha256_json

    return sha256_json([p if not hasattr(p, "__dataclass_fields__") else p.__dict__ for p in parts])


# --- data ------------------------------------------------------------------

def dataset_specs(cfg: AppConfig) -> dict[str, dict]:
    d = cfg.data
    common = dict(size=d.size, world_seed=d.world_seed, seed=d.seed)
    return {
        "train_same_age": dict(n_ids=d.train_ids, imgs_per_id=d.train_imgs_per_id, split="train_same_age", **common),
        "test_same_age": dict(n_ids=d.test_ids, imgs_per_id=d.test_imgs_per_id, split="test_same_age", **common),
        "test_cross_age": dict(n_ids=d.test_ids, imgs_per_id=1, split="test_cross_age", age_gap=d.cross_age_gap,
                               **common),
        "gap_buckets": dict(n_ids=d.bucket_ids, imgs_per_id=1, split="test_cross_age", gap_buckets=True,
                            **dict(common, seed=d.seed + 1)),
        # disjoint identities for tuning guidance hyperparameters
        "val_cross_age": dict(n_ids=VAL_IDS, imgs_per_id=1, split="test_cross_age", age_gap=d.cross_age_gap,
                              id_offset=VAL_ID_OFFSET, **dict(common, seed=d.seed + 2)),
    }


def prepare_data(cfg: AppConfig) -> dict[str, sf.RunManifest]:
    out = {}
    for name, spec in dataset_specs(cfg).items():
        d = cfg.path("data", name)
        stamp = os.path.join(d, "stamp.json")
        key = _key(spec)
        if not _stamp_ok(stamp, key):
            log.info("rendering %s", name)
            sf.build_dataset(out_dir=d, **spec)
            _write_stamp(stamp, key)
        out[name] = sf.RunManifest.load(os.path.join(d, "manifest.jsonl"))
    return out


def degraded_input(manifest: sf.RunManifest, record: sf.ManifestRecord) -> np.ndarray:
    """Deterministic degraded copy of a record's ground truth, keyed by its degradation seed."""
    return degrade_with_seed(sf.load_png(manifest.path(record.gt_path)), record.degradation_seed)


def degrade_with_seed(image: np.ndarray, seed: int) -> np.ndarray:
    p = sample_degradation_params(np.random.default_rng(seed), TOY_DEGRADATION)
    return np.round(apply_degradation(image, p, seed=seed)).astype(np.uint8)


# --- oracles ---------------------------------------------------------------

def prepare_oracles(cfg: AppConfig) -> tuple[Oracles, FaceEncoder, dict]:
    path = cfg.path("oracles.pt")
    stamp = cfg.path("oracles.json")
    o, w = cfg.oracles, cfg.data.world_seed
    key = _key(o, {"world_seed": w})
    age, ident, enc = AgeOracle(), IdentityOracle(), FaceEncoder(cfg.denoiser.id_dim)
    if _stamp_ok(stamp, key) and os.path.exists(path):
        state = torch.load(path, weights_only=True)
        age.load_state_dict(state["age"])
        ident.load_state_dict(state["identity"])
        enc.load_state_dict(state["encoder"])
        with open(stamp) as fh:
            report = json.load(fh)["report"]
    else:
        os.makedirs(cfg.root, exist_ok=True)
        age = train_age_oracle(o.age_steps, world_seed=w, n_ids=o.n_ids, per_id=o.per_id)
        ident = train_identity_oracle(o.identity_steps, world_seed=w, n_ids=o.n_ids, per_id=o.per_id)
        enc = train_face_encoder(o.encoder_steps, world_seed=w, n_ids=o.n_ids, per_id=o.per_id,
                                 id_dim=cfg.denoiser.id_dim)
        report = oracle_report(age, ident, enc, world_seed=w)
        torch.save({"age": age.state_dict(), "identity": ident.state_dict(), "encoder": enc.state_dict()}, path)
        _write_stamp(stamp, key, report=report)
    for m in (age, ident, enc):
        m.eval()
    return Oracles(age, ident), enc, report


# --- training --------------------------------------------------------------

def train_models(cfg: AppConfig, encoder: FaceEncoder, manifests: dict | None = None,
                 variants=("grf", "no_grf")) -> dict[str, str]:
    """Prior, then identity finetunes with and/or without gated fusion; returns checkpoint paths."""
    manifests = manifests or prepare_data(cfg)
    data = TrainData.from_manifest(manifests["train_same_age"])
    out = {}
    prior_cfg = replace(cfg.prior, stage="prior", checkpoint_dir=cfg.path("runs", "prior"), use_grf=False)
    out["prior"] = _train_stage(cfg, prior_cfg, data, encoder)
    for name, grf in (("grf", True), ("no_grf", False)):
        if name not in variants:
            continue
        stage = replace(cfg.identity, stage="identity", checkpoint_dir=cfg.path("runs", name), use_grf=grf,
                        init_from=out["prior"])
        out[name] = _train_stage(cfg, stage, data, encoder)
    return out


def _relative(cfg: AppConfig, path: str | None) -> str | None:
    return None if path is None else os.path.relpath(path, cfg.root)


def _train_stage(cfg: AppConfig, tcfg, data: TrainData, encoder: FaceEncoder) -> str:
    stamp = os.path.join(tcfg.checkpoint_dir, "stamp.json")
    # paths enter the key relative to the root so a copied workspace keeps its cache
    keyed = replace(tcfg, checkpoint_dir=_relative(cfg, tcfg.checkpoint_dir), init_from=_relative(cfg, tcfg.init_from))
    key = _key(keyed, cfg.denoiser, cfg.data, cfg.oracles)
    pending = os.path.join(tcfg.checkpoint_dir, "pending.json")
    if _stamp_ok(stamp, key):
        with open(stamp) as fh:
            return cfg.path(json.load(fh)["checkpoint"])
    if os.path.isdir(tcfg.checkpoint_dir) and not _stamp_ok(pending, key):
        # leftovers from a different config; an interrupted run with the same config resumes instead
        for f in os.listdir(tcfg.checkpoint_dir):
            os.remove(os.path.join(tcfg.checkpoint_dir, f))
    os.makedirs(tcfg.checkpoint_dir, exist_ok=True)
    _write_stamp(pending, key)
    path = run_training(tcfg, data, cfg.denoiser, encoder)
    _write_stamp(stamp, key, checkpoint=_relative(cfg, path))
    return path


def load_model(cfg: AppConfig, variant: str = "grf") -> tuple[RestorationModel, str]:
    """Load a trained variant recorded by :func:`train_models`; returns (model, checkpoint path)."""
    stamp = cfg.path("runs", variant, "stamp.json")
    try:
        with open(stamp) as fh:
            path = cfg.path(json.load(fh)["checkpoint"])
    except OSError as exc:
        raise FileNotFoundError(f"no trained '{variant}' model under {cfg.root}; run `train` first") from exc
    return RestorationModel.load(path)[0], path


# --- restoration -----------------------------------------------------------

def reference_embeddings(model: RestorationModel, manifest: sf.RunManifest) -> torch.Tensor:
    embs = []
    for r in manifest.records:
        imgs = np.stack([sf.load_png(manifest.path(p)) for p in r.ref_paths])
        masks = np.stack([sf.load_mask(manifest.path(sf._mask_path(p))) for p in r.ref_paths])
        with torch.no_grad():
            embs.append(average_embeddings(embed_batch(imgs, masks, model.face_encoder.eval())))
    return torch.stack(embs)


def restore_manifest(model: RestorationModel, manifest: sf.RunManifest, gcfg: GuidanceConfig, out_dir: str,
                     batch_size: int = 64, target_ages=None, sidecars: bool = True,
                     seeds=None) -> list[np.ndarray]:
    """Restore every record (target age = ground-truth age unless overridden) into ``out_dir``.

    Record ``i`` draws its initial noise from ``gcfg.seed + i`` unless ``seeds`` gives one seed
    per record.
    """
    schedule = make_noise_schedule()
    os.makedirs(out_dir, exist_ok=True)
    recs = manifest.records
    ages = list(target_ages) if target_ages is not None else [r.gt_age for r in recs]
    all_seeds = list(seeds) if seeds is not None else [gcfg.seed + i for i in range(len(recs))]
    if len(all_seeds) != len(recs):
        raise ValueError(f"{len(all_seeds)} seeds for {len(recs)} records")
    lq = np.stack([degraded_input(manifest, r) for r in recs])
    emb = reference_embeddings(model, manifest)
    outs = []
    for s in range(0, len(recs), batch_size):
        sl = slice(s, s + batch_size)
        seeds_b = all_seeds[sl]
        imgs, info = aagg_sample_batch(model, lq[sl], emb[sl], gcfg, schedule, seeds_b, target_ages=ages[sl])
        for j, img in enumerate(imgs):
            i = s + j
            name = output_name(i, recs[i])
            sf.save_png(os.path.join(out_dir, name), img)
            if sidecars:
                side = {"seed": seeds_b[j], "cfg": gcfg.to_dict(), "target_age": ages[i],
                        "references": recs[i].ref_paths,
                        "correction_norms": [round(float(v), 8) for v in info["correction_norms"][j]]}
                sf._atomic_write(os.path.join(out_dir, name[:-4] + ".json"), json.dumps(side, indent=1))
            outs.append(img)
    return outs


def restore_and_score(cfg: AppConfig, model: RestorationModel, manifest: sf.RunManifest, gcfg: GuidanceConfig,
                      oracles: Oracles, name: str, target_ages=None) -> dict:
    out_dir = cfg.path("outputs", name)
    restore_manifest(model, manifest, gcfg, out_dir, target_ages=target_ages)
    return evaluate_run(manifest, out_dir, oracles, config={"app": cfg.to_dict(), "guidance": gcfg.to_dict()},
                        out_path=os.path.join(out_dir, "report.json"))
