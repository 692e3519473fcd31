"""Age-aware gradient guidance on top of identity-conditioned DDIM sampling.

Each DDIM step takes the usual classifier-free-guided update under the age prompt c',
then applies ``inner_steps`` latent corrections along the residual
``eps(w, c') - eps(w, c)`` between the age prompt and the generic prompt c, scaled by
``step_scale * m(t) / M`` where ``m(t)`` is ``sqrt(alpha_bar[t])`` or a fixed constant.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import Tensor

from . import prompts
from .denoiser import ConditionBundle
from .diffusion import NoiseSchedule, cfg_combine, ddim_step, ddim_timesteps
from .oracles import NotReadyError

# Tuned once on the toy world (see scripts/tune_guidance.py).
DEFAULT_STEP_SCALE = 30.0


class ConditionMismatchError(ValueError):
    pass


@dataclass
class GuidanceConfig:
    """Sampler and guidance settings.

    Attributes:
        target_age: Age written into the target prompt, in [0, 100].
        inner_steps: Latent corrections per DDIM step; 0 gives plain prompt-conditioned sampling.
        step_scale: Gradient amplification applied to the per-element residual.
        cfg_scale: Classifier-free guidance scale over the identity condition.
        ddim_steps: Number of DDIM steps.
        modulation: ``"sqrt_alpha_bar"`` or ``"fixed"``.
        fixed_scale: Constant modulation used when ``modulation == "fixed"``.
        negative_descriptors: Append artifact descriptors to the source prompt.
        inner_mode: ``"refine"`` re-evaluates the residual at the corrected working latent;
            ``"fixed"`` keeps evaluating it at the step's latent.
        grad_through_net: Differentiate ``mean(residual * w)`` through the network instead
            of treating the residual as constant.
        source_prompt: ``"generic"`` or ``"target"``; the latter makes the residual vanish.
        seed: Base seed; sample ``i`` of a batch draws its initial noise from ``seed + i``.
    """

    target_age: float = 30.0
    inner_steps: int = 5
    step_scale: float = DEFAULT_STEP_SCALE
    cfg_scale: float = 4.0
    ddim_steps: int = 50
    modulation: str = "sqrt_alpha_bar"
    fixed_scale: float = 1.0
    negative_descriptors: bool = True
    inner_mode: str = "refine"
    grad_through_net: bool = False
    source_prompt: str = "generic"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.target_age <= prompts.MAX_AGE:
            raise ValueError(f"target_age {self.target_age} outside [0, {prompts.MAX_AGE}]")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if self.modulation not in ("sqrt_alpha_bar", "fixed"):
            raise ValueError(f"unknown modulation {self.modulation!r}")
        if self.modulation == "fixed" and not 0 <= self.fixed_scale <= 1:
            raise ValueError("fixed modulation scale must lie in [0, 1]")
        if self.inner_mode not in ("refine", "fixed"):
            raise ValueError(f"unknown inner_mode {self.inner_mode!r}")
        if self.source_prompt not in ("generic", "target"):
            raise ValueError(f"unknown source_prompt {self.source_prompt!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def parse_modulation(text: str) -> tuple[str, float]:
    """``"sqrt"`` / ``"sqrt_alpha_bar"`` / ``"fixed:S"`` -> (mode, fixed scale)."""
    if text in ("sqrt", "sqrt_alpha_bar"):
        return "sqrt_alpha_bar", 1.0
    if text.startswith("fixed:"):
        s = float(text.split(":", 1)[1])
        if not 0 <= s <= 1:
            raise ValueError("fixed modulation scale must lie in [0, 1]")
        return "fixed", s
    raise ValueError(f"cannot parse modulation {text!r}")


def modulation(t: int, cfg: GuidanceConfig, schedule: NoiseSchedule) -> float:
    if cfg.modulation == "fixed":
        return float(cfg.fixed_scale)
    return math.sqrt(float(schedule.alpha_bar[t]))


def guided_eps(model, z: Tensor, t, cond: ConditionBundle, cfg_scale: float) -> Tensor:
    """CFG over the identity condition; the unconditional pass keeps prompt and LQ features."""
    eps_c = model.predict_eps(z, t, cond)
    if cond.id_tokens is None or cfg_scale == 1:
        return eps_c
    return cfg_combine(model.predict_eps(z, t, cond.without_identity()), eps_c, cfg_scale)


def _same(a, b) -> bool:
    if a is None or b is None:
        return a is b
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return a is b or (a.shape == b.shape and torch.equal(a, b))


def check_matching(cond_c: ConditionBundle, cond_cprime: ConditionBundle) -> None:
    for name in ("id_tokens", "lq_features", "id_keep"):
        if not _same(getattr(cond_c, name), getattr(cond_cprime, name)):
            raise ConditionMismatchError(f"conditions differ in {name}; only prompts may differ")


def age_gradient(z_t: Tensor, t, cond_c: ConditionBundle, cond_cprime: ConditionBundle, model,
                 cfg_scale: float = 1.0) -> Tensor:
    """Residual ``eps(z_t, c') - eps(z_t, c)`` with both passes under the same CFG."""
    check_matching(cond_c, cond_cprime)
    return guided_eps(model, z_t, t, cond_cprime, cfg_scale) - guided_eps(model, z_t, t, cond_c, cfg_scale)


def _full_jacobian_grad(model, w: Tensor, t, cond_c, cond_cp, cfg_scale) -> Tensor:
    with torch.enable_grad():
        w_ = w.detach().requires_grad_(True)
        d = age_gradient(w_, t, cond_c, cond_cp, model, cfg_scale)
        loss = (d * w_).flatten(1).mean(1).sum()
        (g,) = torch.autograd.grad(loss, w_)
    return g


def initial_noise(shape: tuple[int, ...], seeds, dtype=torch.float32) -> Tensor:
    """One independent standard-normal latent per seed."""
    return torch.stack([torch.randn(shape, generator=torch.Generator().manual_seed(int(s)), dtype=dtype)
                        for s in seeds])


@torch.no_grad()
def guided_sample(model, cond_c: ConditionBundle, cond_cprime: ConditionBundle, cfg: GuidanceConfig,
                  schedule: NoiseSchedule, z_T: Tensor, record_heatmaps: bool = False) -> tuple[Tensor, dict]:
    """Run the guided DDIM loop from ``z_T``; returns the final latent and diagnostics."""
    check_matching(cond_c, cond_cprime)
    steps = ddim_timesteps(schedule, cfg.ddim_steps)
    b = z_T.shape[0]
    m_el = z_T[0].numel()
    z = z_T
    norms, heat = [], []
    block = model.denoiser.heatmap_block() if record_heatmaps else None
    for t, t_prev in zip(steps[:-1], steps[1:]):
        t, t_prev = int(t), int(t_prev)
        if block is not None:
            block.record = []
        eps_c = model.predict_eps(z, t, cond_cprime)
        if block is not None:
            heat.append(block.record[0] if block.record else None)
            block.record = None
        if cond_cprime.id_tokens is None or cfg.cfg_scale == 1:
            eps_trg = eps_c
        else:
            eps_trg = cfg_combine(model.predict_eps(z, t, cond_cprime.without_identity()), eps_c, cfg.cfg_scale)
        z_prev = ddim_step(z, eps_trg, t, t_prev, schedule)

        scale = cfg.step_scale * modulation(t, cfg, schedule)
        step_norm = torch.zeros(b, dtype=torch.float64)
        if cfg.inner_steps > 0 and scale != 0:
            w = z
            for k in range(cfg.inner_steps):
                if cfg.grad_through_net:
                    g = _full_jacobian_grad(model, w, t, cond_c, cond_cprime, cfg.cfg_scale)
                else:
                    first = k == 0 or cfg.inner_mode == "fixed"
                    trg = eps_trg if first else guided_eps(model, w, t, cond_cprime, cfg.cfg_scale)
                    g = (trg - guided_eps(model, w, t, cond_c, cfg.cfg_scale)) / m_el
                corr = scale * g
                z_prev = z_prev - corr
                if cfg.inner_mode == "refine":
                    w = w - corr
                step_norm += corr.flatten(1).double().norm(dim=1)
        if not torch.isfinite(z_prev).all():
            raise FloatingPointError(f"non-finite latent at t={t}")
        norms.append(step_norm)
        z = z_prev
    info = {"correction_norms": torch.stack(norms, 1)}  # (B, steps)
    if record_heatmaps:
        info["heatmaps"] = [h for h in heat if h is not None]
    return z, info


def make_conditions(model, lq: Tensor, id_tokens: Tensor | None, cfg: GuidanceConfig):
    c, c_prime = prompts.build_prompts(cfg.target_age, cfg.negative_descriptors)
    if cfg.source_prompt == "target":
        c = c_prime
    b = lq.shape[0]
    cond_cp = model.condition(prompts.pad_batch([c_prime] * b), lq, id_tokens)
    cond_c = cond_cp.replace(prompt_tokens=prompts.pad_batch([c] * b))
    return cond_c, cond_cp, {"source_tokens": prompts.decode(c), "target_tokens": prompts.decode(c_prime)}


@torch.no_grad()
def aagg_sample_batch(model, lq: np.ndarray, ref_embeddings: Tensor | None, cfg: GuidanceConfig,
                      schedule: NoiseSchedule, seeds=None, record_heatmaps: bool = False,
                      target_ages=None) -> tuple[np.ndarray, dict]:
    """Restore a batch of degraded uint8 images (B, H, W) with averaged reference embeddings (B, D).

    ``target_ages`` optionally overrides ``cfg.target_age`` per sample.
    """
    from .model import image_batch, to_uint8

    if not getattr(model, "trained", True):
        raise NotReadyError("restoration model has not been trained")
    model.eval()
    lq_t = image_batch(lq)
    b = lq_t.shape[0]
    seeds = list(seeds) if seeds is not None else [cfg.seed + i for i in range(b)]
    id_tokens = model.projector(ref_embeddings) if ref_embeddings is not None else None
    cond_c, cond_cp, meta = make_conditions(model, lq_t, id_tokens, cfg)
    if target_ages is not None:
        pairs = [prompts.build_prompts(a, cfg.negative_descriptors) for a in target_ages]
        src = [p[1] if cfg.source_prompt == "target" else p[0] for p in pairs]
        length = max(len(p) for pr in pairs for p in pr)
        cond_cp = cond_cp.replace(prompt_tokens=prompts.pad_batch([p[1] for p in pairs], length))
        cond_c = cond_cp.replace(prompt_tokens=prompts.pad_batch(src, length))
    z_T = initial_noise(lq_t.shape[1:], seeds)
    z, info = guided_sample(model, cond_c, cond_cp, cfg, schedule, z_T, record_heatmaps)
    info.update(meta, seeds=seeds, latent=z)
    return to_uint8(z), info


def aagg_sample(model, lq: np.ndarray, references: list[tuple[np.ndarray, np.ndarray]], cfg: GuidanceConfig,
                schedule: NoiseSchedule, record_heatmaps: bool = False) -> tuple[np.ndarray, dict]:
    """Restore one degraded image from (image, mask) references of the same person."""
    if not references:
        raise ValueError("at least one reference image is required")
    emb = model.reference_embedding(references)
    out, info = aagg_sample_batch(model, np.asarray(lq)[None], emb[None], cfg, schedule, [cfg.seed],
                                  record_heatmaps)
    info["correction_norms"] = info["correction_norms"][0]
    return out[0], info
