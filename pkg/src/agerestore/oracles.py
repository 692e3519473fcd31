"""Evaluation oracles (age regressor, identity regressor) and the toy face-recognition encoder.

All three networks are trained on fresh synthetic renders from disjoint identity ranges.
The oracles never see restoration outputs; the face encoder used by the restoration model
has its own architecture, seed and parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import synthface as sf
from .degrade import gaussian_blur
from .identity import FaceEncoder, embed_batch, to_unit_range

log = logging.getLogger(__name__)


class NotReadyError(RuntimeError):
    pass


class _OracleNet(nn.Module):
    def __init__(self, out_dim: int, width: int = 24):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(1, w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 4 * w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(4 * w * 16, 128), nn.ReLU(), nn.Linear(128, out_dim))
        self.register_buffer("trained", torch.zeros((), dtype=torch.bool))

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))

    def check_ready(self):
        if not bool(self.trained):
            raise NotReadyError(f"{type(self).__name__} has not been trained")


class AgeOracle(_OracleNet):
    def __init__(self):
        super().__init__(1)

    def predict(self, x: Tensor) -> Tensor:
        return 100 * torch.sigmoid(self(x)[:, 0])


class IdentityOracle(_OracleNet):
    """Regresses the identity factor vector; embeddings are its unit-normalised output."""

    def __init__(self):
        super().__init__(sf.K_ID, width=24)

    def embed(self, x: Tensor) -> Tensor:
        return F.normalize(self(x), dim=-1)


def _images(x) -> Tensor:
    t = x if isinstance(x, Tensor) else to_unit_range(x)
    return t if t.ndim == 4 else t[None]


@torch.no_grad()
def age_oracle(image, oracle: AgeOracle) -> Tensor:
    """Predicted age(s) in [0, 100]; accepts uint8 images or [-1, 1] tensors."""
    oracle.check_ready()
    oracle.eval()
    return oracle.predict(_images(image))


@torch.no_grad()
def identity_oracle(image_a, image_b, oracle: IdentityOracle) -> Tensor:
    """Cosine similarity between oracle identity embeddings, per pair."""
    oracle.check_ready()
    oracle.eval()
    ea = oracle.embed(_images(image_a))
    eb = oracle.embed(_images(image_b))
    return (ea * eb).sum(-1).clamp(-1, 1)


# --- data pools ------------------------------------------------------------

@dataclass
class Pool:
    images: np.ndarray  # (N, H, W) uint8
    masks: np.ndarray
    identity: np.ndarray  # (N, K_ID)
    ages: np.ndarray
    labels: np.ndarray  # identity index within the pool


def render_pool(purpose: str, n_ids: int, per_id: int, seed: int, world_seed: int = 0,
                size: int = 32, ages: np.ndarray | None = None) -> Pool:
    rng = np.random.default_rng([seed, 11])
    imgs, masks, idv, agev, lab = [], [], [], [], []
    for j in range(n_ids):
        ident = sf.identity_vector(world_seed, sf.ID_BASE[purpose] + j)
        for i in range(per_id):
            age = float(ages[i]) if ages is not None else float(rng.uniform(0, 100))
            img, m = sf.render_face(sf.sample_spec(rng, ident, age), size)
            imgs.append(img)
            masks.append(m)
            idv.append(ident)
            agev.append(age)
            lab.append(j)
    return Pool(np.stack(imgs), np.stack(masks), np.stack(idv), np.array(agev), np.array(lab))


def _augment(batch: np.ndarray, rng: np.random.Generator, blur: bool) -> np.ndarray:
    out = batch.astype(np.float64)
    if blur:
        for i in range(len(out)):
            if rng.random() < 0.5:
                out[i] = gaussian_blur(out[i], rng.uniform(0.3, 1.0))
    out = out + rng.normal(0, rng.uniform(0, 3), out.shape)
    return np.clip(out, 0, 255)


def _train_loop(model, loss_fn, pool: Pool, steps: int, seed: int, lr: float, batch: int = 64,
                blur_aug: bool = False, masked: bool = False):
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.1)
    model.train()
    for step in range(steps):
        idx = rng.integers(0, len(pool.images), batch)
        imgs = pool.images[idx]
        if masked:
            imgs = np.where(pool.masks[idx], imgs, 0)
        x = to_unit_range(_augment(imgs, rng, blur_aug).astype(np.float32).round())
        loss = loss_fn(model, x, idx)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 500 == 0:
            log.info("%s step %d loss %.4f", type(model).__name__, step, loss.item())
    model.eval()
    return model


def train_age_oracle(steps: int = 3000, seed: int = 1, world_seed: int = 0, n_ids: int = 400,
                     per_id: int = 12) -> AgeOracle:
    pool = render_pool("oracle", n_ids, per_id, seed, world_seed)
    torch.manual_seed(seed)
    model = AgeOracle()
    target = torch.tensor(pool.ages, dtype=torch.float32)

    def loss_fn(m, x, idx):
        return F.smooth_l1_loss(m.predict(x), target[idx], beta=2.0)

    _train_loop(model, loss_fn, pool, steps, seed, lr=2e-3)
    model.trained.fill_(True)
    return model


def train_identity_oracle(steps: int = 3000, seed: int = 2, world_seed: int = 0, n_ids: int = 400,
                          per_id: int = 12) -> IdentityOracle:
    pool = render_pool("oracle", n_ids, per_id, seed, world_seed)
    torch.manual_seed(seed)
    model = IdentityOracle()
    target = torch.tensor(pool.identity, dtype=torch.float32)

    def loss_fn(m, x, idx):
        return F.mse_loss(m(x), target[idx])

    _train_loop(model, loss_fn, pool, steps, seed, lr=2e-3, blur_aug=True)
    model.trained.fill_(True)
    return model


class _EncoderTrainer(nn.Module):
    def __init__(self, encoder: FaceEncoder, n_classes: int):
        super().__init__()
        self.encoder = encoder
        self.classes = nn.Parameter(torch.randn(n_classes, encoder.id_dim) * 0.1)
        self.factors = nn.Linear(encoder.id_dim, sf.K_ID)


def train_face_encoder(steps: int = 2500, seed: int = 3, world_seed: int = 0, n_ids: int = 300,
                       per_id: int = 12, id_dim: int = 64) -> FaceEncoder:
    """Cosine-softmax identity classification plus identity-factor regression on masked faces."""
    pool = render_pool("encoder", n_ids, per_id, seed, world_seed)
    torch.manual_seed(seed)
    trainer = _EncoderTrainer(FaceEncoder(id_dim), n_ids)
    labels = torch.tensor(pool.labels)
    factors = torch.tensor(pool.identity, dtype=torch.float32)

    def loss_fn(m, x, idx):
        e = F.normalize(m.encoder(x), dim=-1)
        logits = 16.0 * e @ F.normalize(m.classes, dim=-1).T
        return F.cross_entropy(logits, labels[idx]) + 4 * F.mse_loss(m.factors(e), factors[idx])

    _train_loop(trainer, loss_fn, pool, steps, seed, lr=2e-3, blur_aug=True, masked=True)
    return trainer.encoder.eval()


# --- acceptance gates ------------------------------------------------------

AGE_MAE_GATE = 5.0
ID_MARGIN_GATE = 0.2
SAME_ID_AGE_GATE = 0.8
DIFF_ID_GATE = 0.5
NUISANCE_GATE = 0.8


def _pairs_cosine(emb: Tensor, n_ids: int, per_id: int):
    e = emb.view(n_ids, per_id, -1)
    same = (e[:, 0] * e[:, 1]).sum(-1).mean().item()
    perm = torch.roll(e[:, 0], 1, dims=0)
    diff = (e[:, 0] * perm).sum(-1).mean().item()
    return same, diff


@torch.no_grad()
def oracle_report(age: AgeOracle, ident: IdentityOracle, encoder: FaceEncoder | None = None,
                  world_seed: int = 0, n_ids: int = 100, seed: int = 99) -> dict:
    """Evaluate oracle gates on held-out identities; ``passed`` is the conjunction."""
    clean = render_pool("oracle_eval", n_ids, 4, seed, world_seed)
    pred = age_oracle(clean.images, age).numpy()
    mae = float(np.mean(np.abs(pred - clean.ages)))

    cross = render_pool("oracle_eval", n_ids, 2, seed + 1, world_seed, ages=np.array([20.0, 70.0]))
    emb = ident.embed(to_unit_range(cross.images))
    same_age_gap, diff_id = _pairs_cosine(emb, n_ids, 2)
    nuis = render_pool("oracle_eval", n_ids, 2, seed + 2, world_seed, ages=np.array([45.0, 45.0]))
    same_nuis, _ = _pairs_cosine(ident.embed(to_unit_range(nuis.images)), n_ids, 2)

    young = render_pool("oracle_eval", n_ids, 2, seed + 3, world_seed, ages=np.array([20.0, 80.0]))
    pa = age_oracle(young.images, age).view(n_ids, 2)
    report = {
        "age_mae_clean": mae,
        "age_monotone": bool(pa[:, 1].mean() > pa[:, 0].mean()),
        "age_mean_pred_20": float(pa[:, 0].mean()),
        "age_mean_pred_80": float(pa[:, 1].mean()),
        "id_same_identity_cross_age": same_age_gap,
        "id_different_identity": diff_id,
        "id_margin": same_age_gap - diff_id,
        "id_same_identity_nuisance": same_nuis,
        "gates": {"age_mae": AGE_MAE_GATE, "id_margin": ID_MARGIN_GATE, "same_id_age": SAME_ID_AGE_GATE,
                  "diff_id": DIFF_ID_GATE, "nuisance": NUISANCE_GATE},
    }
    passed = (mae < AGE_MAE_GATE and report["age_monotone"] and report["id_margin"] >= ID_MARGIN_GATE
              and same_age_gap > SAME_ID_AGE_GATE and diff_id < DIFF_ID_GATE and same_nuis > NUISANCE_GATE)
    if encoder is not None:
        e = embed_batch(cross.images, cross.masks, encoder.eval())
        s, d = _pairs_cosine(e, n_ids, 2)
        report["encoder_same_identity_cross_age"] = s
        report["encoder_different_identity"] = d
        report["encoder_margin"] = s - d
        passed = passed and s - d >= ID_MARGIN_GATE
    report["passed"] = bool(passed)
    return report
