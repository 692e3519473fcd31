"""Training loops for the restoration denoiser.

Two stages share one loop:

* ``prior``: the base restoration prior. Prompts mix the generic prompt, age prompts and
  artifact descriptors; no identity tokens; structural features added directly.
* ``identity``: eps-MSE with the generic prompt, averaged reference embeddings projected
  to identity tokens (dropped with ``id_dropout_p`` for classifier-free guidance), and
  gated fusion of structural features unless disabled.
"""

from __future__ import annotations

import glob
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from . import prompts
from . import synthface as sf
from .degrade import apply_degradation, gaussian_blur, sample_degradation_params
from .denoiser import ConditionBundle, DenoiserConfig, config_dict, load_checkpoint, submodule_state
from .diffusion import NoiseSchedule, forward_diffuse, make_noise_schedule
from .identity import FaceEncoder
from .model import RestorationModel, image_batch

log = logging.getLogger(__name__)

TOY_DEGRADATION = {"sigma_blur": (0.2, 1.5), "r": (1.0, 4.0), "delta": (0.0, 15.0), "q": (30, 100)}


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 4e-5
    batch_size: int = 32
    max_steps: int = 20000
    id_dropout_p: float = 0.05
    lambda_id: float = 0.75
    ref_count_range: tuple[int, int] = (1, 5)
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 1000
    checkpoint_dir: str = "checkpoints"
    use_grf: bool = True
    stage: str = "identity"
    train_scope: str = "adapters"
    init_from: str | None = None
    warmup_steps: int = 100
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    degradation_ranges: dict = field(default_factory=lambda: dict(TOY_DEGRADATION))
    prior_age_prompt_p: float = 0.5
    prior_descriptor_p: float = 0.2
    lq_dropout_p: float = 0.0
    loss_weighting: str = "eps"
    val_records: int = 32
    log_every: int = 50

    def __post_init__(self):
        self.ref_count_range = tuple(self.ref_count_range)
        self.betas = tuple(self.betas)
        self.degradation_ranges = {k: tuple(v) for k, v in self.degradation_ranges.items()}
        if not 0 <= self.id_dropout_p <= 1:
            raise ValueError("id_dropout_p must be in [0, 1]")
        if self.stage not in ("identity", "prior"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.train_scope not in ("adapters", "all"):
            raise ValueError(f"unknown train_scope {self.train_scope!r}")
        if not 0 <= self.lq_dropout_p <= 1:
            raise ValueError("lq_dropout_p must be in [0, 1]")
        if self.loss_weighting not in ("eps", "v"):
            raise ValueError(f"unknown loss_weighting {self.loss_weighting!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))


# --- data ------------------------------------------------------------------

@dataclass
class TrainData:
    images: np.ndarray  # (N, H, W) uint8
    masks: np.ndarray
    ages: np.ndarray
    groups: list[np.ndarray]  # indices of images per identity
    group_of: np.ndarray
    embeddings: Tensor | None = None  # (N, D_id) unit embeddings from the frozen encoder

    @classmethod
    def from_manifest(cls, manifest: sf.RunManifest) -> "TrainData":
        paths: dict[str, int] = {}
        ages, gid = [], []
        by_id: dict[int, list[int]] = {}
        for r in manifest.records:
            for p, a in [(r.gt_path, r.gt_age)] + list(zip(r.ref_paths, r.ref_ages)):
                if p not in paths:
                    paths[p] = len(paths)
                    ages.append(a)
                    by_id.setdefault(r.identity_id, []).append(paths[p])
        missing = [p for p in paths if not os.path.exists(manifest.path(p))]
        if missing:
            raise FileNotFoundError(f"{len(missing)} dataset files missing, e.g. {missing[0]}")
        order = sorted(paths, key=paths.get)
        images = np.stack([sf.load_png(manifest.path(p)) for p in order])
        masks = np.stack([sf.load_mask(manifest.path(sf._mask_path(p))) for p in order])
        groups = [np.array(v) for _, v in sorted(by_id.items())]
        group_of = np.zeros(len(order), dtype=int)
        for g, idx in enumerate(groups):
            group_of[idx] = g
        return cls(images, masks, np.array(ages, dtype=np.float64), groups, group_of)

    @classmethod
    def from_pool(cls, images, masks, ages, labels) -> "TrainData":
        groups = [np.flatnonzero(labels == g) for g in np.unique(labels)]
        return cls(images, masks, np.asarray(ages, dtype=np.float64), groups, np.asarray(labels))

    def compute_embeddings(self, encoder: FaceEncoder, chunk: int = 256) -> None:
        from .identity import embed_batch

        with torch.no_grad():
            out = [embed_batch(self.images[i:i + chunk], self.masks[i:i + chunk], encoder.eval())
                   for i in range(0, len(self.images), chunk)]
        self.embeddings = torch.cat(out)


def _artifact(img: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    x = img.astype(np.float64)
    if kind == "blurry":
        x = gaussian_blur(x, rng.uniform(0.9, 1.5))
    elif kind == "oversaturated":
        x = (x - 110) * 1.7 + 128
    elif kind == "cartoon-like":
        x = np.round(x / 48) * 48
    elif kind == "malformed":
        h = x.shape[0] // 2
        x[h:] = np.roll(x[h:], int(rng.choice([-3, 3])), axis=1)
    return np.clip(np.round(x), 0, 255).astype(np.uint8)


def degrade_batch(images: np.ndarray, rng: np.random.Generator, ranges: dict) -> np.ndarray:
    out = np.empty(images.shape, dtype=np.float64)
    for i, img in enumerate(images):
        p = sample_degradation_params(rng, ranges)
        out[i] = apply_degradation(img, p, seed=int(rng.integers(0, 2**31 - 1)))
    return np.round(out)


def make_batch(data: TrainData, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    idx = rng.integers(0, len(data.images), cfg.batch_size)
    hq = data.images[idx].copy()
    batch: dict = {}
    if cfg.stage == "prior":
        plist = []
        for i, j in enumerate(idx):
            p = prompts.age_prompt(data.ages[j]) if rng.random() < cfg.prior_age_prompt_p else prompts.generic_prompt()
            if rng.random() < cfg.prior_descriptor_p:
                kind = str(rng.choice(prompts.DESCRIPTORS))
                hq[i] = _artifact(hq[i], kind, rng)
                p = p + prompts.encode([kind])
            plist.append(p)
        batch["prompt"] = prompts.pad_batch(plist)
        batch["id_emb"] = None
    else:
        lo, hi = cfg.ref_count_range
        embs = []
        for j in idx:
            others = data.groups[data.group_of[j]]
            others = others[others != j]
            if len(others) == 0:
                others = np.array([j])
            n = int(rng.integers(lo, min(hi, len(others)) + 1)) if len(others) >= lo else len(others)
            pick = rng.choice(others, size=n, replace=False)
            e = data.embeddings[pick].double().sum(0)
            embs.append((e / e.norm()).float())
        batch["id_emb"] = torch.stack(embs)
        batch["prompt"] = prompts.pad_batch([prompts.generic_prompt()] * cfg.batch_size)
    batch["hq"] = image_batch(hq)
    batch["lq"] = image_batch(degrade_batch(data.images[idx], rng, cfg.degradation_ranges))
    return batch


# --- one step --------------------------------------------------------------

def step_loss(batch: dict, model: RestorationModel, schedule: NoiseSchedule, gen: torch.Generator,
              id_dropout_p: float, lq_dropout_p: float = 0.0, weighting: str = "eps") -> Tensor:
    """Noise-prediction loss of one batch.

    ``weighting="v"`` divides each sample's eps error by sqrt(abar_t), which equals the
    v-prediction error and keeps high-noise steps from being ignored.
    """
    hq = batch["hq"].to(next(model.parameters()).dtype)
    b = hq.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=gen)
    eps = torch.randn(hq.shape, generator=gen, dtype=hq.dtype)
    z_t = forward_diffuse(hq, t, eps, schedule)
    keep = (torch.rand(b, generator=gen) >= id_dropout_p).to(hq.dtype)
    id_tokens = None
    if batch.get("id_emb") is not None:
        id_tokens = model.projector(batch["id_emb"].to(hq.dtype))
    cond = model.condition(batch["prompt"], batch["lq"].to(hq.dtype), id_tokens,
                           keep if id_tokens is not None else None)
    if lq_dropout_p > 0:
        lq_keep = (torch.rand(b, generator=gen) >= lq_dropout_p).to(hq.dtype).view(-1, 1, 1, 1)
        cond = cond.replace(lq_features=[f * lq_keep for f in cond.lq_features])
    err = model.predict_eps(z_t, t, cond) - eps
    if weighting == "v":
        err = err / schedule.coefficients(t, err)[0]
    return err.pow(2).mean()


def training_step(batch: dict, model: RestorationModel, optimizer: torch.optim.Optimizer,
                  schedule: NoiseSchedule, gen: torch.Generator, id_dropout_p: float = 0.05,
                  lq_dropout_p: float = 0.0, weighting: str = "eps") -> float:
    """One optimiser update; returns the loss of the batch (computed before the update)."""
    model.train()
    loss = step_loss(batch, model, schedule, gen, id_dropout_p, lq_dropout_p, weighting)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.item())


def make_optimizer(model: RestorationModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.stage == "identity" and cfg.train_scope == "adapters":
        params = model.adapter_parameters()
        keep = {id(p) for p in params}
        for p in model.parameters():
            p.requires_grad_(id(p) in keep)
    else:
        params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def lr_at(step: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    return cfg.lr


# --- validation ------------------------------------------------------------

@torch.no_grad()
def validation_metrics(model: RestorationModel, data: TrainData, schedule: NoiseSchedule,
                       n: int, seed: int = 1234) -> dict:
    """Fixed-seed eps-MSE on ``n`` images, with and without identity tokens."""
    model.eval()
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    n = min(n, len(data.images))
    idx = np.arange(n)
    hq = image_batch(data.images[idx])
    lq = image_batch(degrade_batch(data.images[idx], rng, TOY_DEGRADATION))
    t = torch.randint(1, schedule.T + 1, (n,), generator=gen)
    eps = torch.randn(hq.shape, generator=gen)
    z_t = forward_diffuse(hq, t, eps, schedule)
    out = {}
    prompt = prompts.pad_batch([prompts.generic_prompt()] * n)
    id_tokens = None
    if data.embeddings is not None:
        id_tokens = model.projector(data.embeddings[idx])
    cond = model.condition(prompt, lq, id_tokens)
    pred = model.predict_eps(z_t, t, cond)
    out["val_mse"] = F.mse_loss(pred, eps).item()
    pred_null = model.predict_eps(z_t, t, cond.without_identity())
    out["val_mse_no_id"] = F.mse_loss(pred_null, eps).item()
    out["cond_vs_null_mad"] = (pred - pred_null).abs().mean().item()
    model.train()
    return out


# --- full run --------------------------------------------------------------

def build_model(denoiser_cfg: DenoiserConfig, cfg: TrainConfig, face_encoder: FaceEncoder | None) -> RestorationModel:
    dcfg = DenoiserConfig.from_dict(dict(config_dict(denoiser_cfg), use_grf=cfg.use_grf, lambda_id=cfg.lambda_id))
    torch.manual_seed(cfg.seed)
    model = RestorationModel(dcfg, face_encoder)
    if cfg.init_from:
        _, state = load_checkpoint(cfg.init_from)
        missing, unexpected = model.denoiser.load_state_dict(submodule_state(state, "denoiser"), strict=False)
        if unexpected or any(not k.startswith("grf.") for k in missing):
            raise ValueError(f"incompatible init checkpoint: missing={missing} unexpected={unexpected}")
        if cfg.stage == "identity":
            model.init_identity_branch()
    return model


def _latest_checkpoint(d: str) -> str | None:
    cks = sorted(glob.glob(os.path.join(d, "step_*.ckpt")))
    return cks[-1] if cks else None


def _smoothed(values: list[float], window: int) -> float:
    return float(np.mean(values)) if values else float("nan")


def run_training(cfg: TrainConfig, data: TrainData | sf.RunManifest, denoiser_cfg: DenoiserConfig | None = None,
                 face_encoder: FaceEncoder | None = None, schedule: NoiseSchedule | None = None,
                 resume: bool = True) -> str:
    """Train, checkpointing into ``cfg.checkpoint_dir``; returns the final checkpoint path.

    Resuming from the newest ``step_*.ckpt`` restores weights, optimiser and RNG state so the
    remaining losses match an uninterrupted run.
    """
    if isinstance(data, sf.RunManifest):
        if data.split != "train_same_age":
            raise ValueError(f"training needs a train_same_age manifest, got {data.split}")
        data = TrainData.from_manifest(data)
    torch.use_deterministic_algorithms(True)
    schedule = schedule or make_noise_schedule()
    denoiser_cfg = denoiser_cfg or DenoiserConfig()
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    model = build_model(denoiser_cfg, cfg, face_encoder)
    if cfg.stage == "identity" and data.embeddings is None:
        data.compute_embeddings(model.face_encoder)
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    start, losses = 0, []

    latest = _latest_checkpoint(cfg.checkpoint_dir) if resume else None
    if latest:
        header, state = load_checkpoint(latest)
        model.denoiser.load_state_dict(submodule_state(state, "denoiser"))
        model.projector.load_state_dict(submodule_state(state, "projector"))
        opt.load_state_dict(torch.load(os.path.join(cfg.checkpoint_dir, f"optim_{header['step']:07d}.pt"),
                                       weights_only=False))
        rng.bit_generator.state = header["numpy_rng"]
        gen.set_state(state["__torch_rng__"])
        start, losses = header["step"], header["losses"]
        log.info("resumed from %s at step %d", latest, start)

    log_path = os.path.join(cfg.checkpoint_dir, "train_log.jsonl")
    val_path = os.path.join(cfg.checkpoint_dir, "val_log.jsonl")
    t0 = time.time()

    def checkpoint(step: int) -> str:
        path = os.path.join(cfg.checkpoint_dir, f"step_{step:07d}.ckpt")
        header = {"step": step, "train_config": cfg.to_dict(), "schedule_hash": schedule.digest(),
                  "numpy_rng": rng.bit_generator.state, "losses": losses}
        torch.save(opt.state_dict(), os.path.join(cfg.checkpoint_dir, f"optim_{step:07d}.pt"))
        model.save(path, header, {"__torch_rng__": gen.get_state()})
        return path

    path = latest
    for step in range(start, cfg.max_steps):
        for g in opt.param_groups:
            g["lr"] = lr_at(step, cfg)
        batch = make_batch(data, cfg, rng)
        try:
            loss = training_step(batch, model, opt, schedule, gen, cfg.id_dropout_p, cfg.lq_dropout_p,
                                 cfg.loss_weighting)
        except TrainingDivergedError:
            with open(os.path.join(cfg.checkpoint_dir, "nan_dump.json"), "w") as fh:
                json.dump({"step": step, "recent_losses": losses[-20:], "lr": lr_at(step, cfg)}, fh)
            raise
        losses.append(loss)
        if step % cfg.log_every == 0 or step == cfg.max_steps - 1:
            with open(log_path, "a") as fh:
                fh.write(json.dumps({"step": step, "loss": loss, "lr": lr_at(step, cfg),
                                     "wallclock": round(time.time() - t0, 3)}) + "\n")
            log.info("%s step %d loss %.4f", cfg.stage, step, loss)
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            m = validation_metrics(model, data, schedule, cfg.val_records)
            with open(val_path, "a") as fh:
                fh.write(json.dumps({"step": step + 1, **m}) + "\n")
        if (step + 1) % cfg.checkpoint_every == 0 or step + 1 == cfg.max_steps:
            path = checkpoint(step + 1)

    window = max(1, min(200, len(losses) // 5))
    initial, final = _smoothed(losses[:window], window), _smoothed(losses[-window:], window)
    converged = final < 0.7 * initial if not cfg.init_from else final <= initial
    summary = {"checkpoint": path, "steps": len(losses), "initial_smoothed_loss": initial,
               "final_smoothed_loss": final, "converged": bool(converged)}
    model.trained = True
    with open(os.path.join(cfg.checkpoint_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
    if not converged:
        log.warning("training flagged as failed: smoothed loss %.4f -> %.4f", initial, final)
    return path
