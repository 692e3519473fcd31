"""The restoration model bundle: denoiser + identity token projector + frozen face encoder."""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor, nn

from . import prompts
from .denoiser import (CheckpointError, ConditionBundle, Denoiser, DenoiserConfig, config_dict,
                       load_checkpoint, save_checkpoint, submodule_state)
from .identity import FaceEncoder, TokenProjector, average_embeddings, embed_batch, to_unit_range


class RestorationModel(nn.Module):
    def __init__(self, cfg: DenoiserConfig, face_encoder: FaceEncoder | None = None):
        super().__init__()
        self.cfg = cfg
        self.denoiser = Denoiser(cfg)
        self.projector = TokenProjector(cfg.id_dim, cfg.id_token_count, cfg.attn_dim)
        self.face_encoder = face_encoder or FaceEncoder(cfg.id_dim, image_size=cfg.image_size)
        self.face_encoder.requires_grad_(False)
        self.trained = False

    def train(self, mode: bool = True):
        super().train(mode)
        self.face_encoder.eval()
        return self

    def adapter_parameters(self) -> list[nn.Parameter]:
        """Parameters trained in the identity stage: projector, identity K/V, fusion and control branch."""
        params = list(self.projector.parameters())
        for name, p in self.denoiser.named_parameters():
            if "_id." in name or name.startswith(("grf.", "control.")):
                params.append(p)
        return params

    def init_identity_branch(self) -> None:
        """Copy text key/value projections into the identity projections of every attention block."""
        with torch.no_grad():
            for m in self.denoiser.modules():
                if hasattr(m, "to_k_id"):
                    m.to_k_id.weight.copy_(m.to_k.weight)
                    m.to_v_id.weight.copy_(m.to_v.weight)

    @torch.no_grad()
    def embed_references(self, images: np.ndarray, masks: np.ndarray) -> Tensor:
        return embed_batch(images, masks, self.face_encoder.eval())

    def id_tokens_from_embeddings(self, emb: Tensor) -> Tensor:
        return self.projector(emb)

    @torch.no_grad()
    def reference_embedding(self, refs: list[tuple[np.ndarray, np.ndarray]]) -> Tensor:
        if not refs:
            raise ValueError("at least one reference image is required")
        imgs = np.stack([r[0] for r in refs])
        masks = np.stack([r[1] for r in refs])
        return average_embeddings(self.embed_references(imgs, masks))

    def condition(self, prompt_tokens: Tensor, lq: Tensor | None, id_tokens: Tensor | None,
                  id_keep: Tensor | None = None) -> ConditionBundle:
        feats = self.denoiser.control(lq) if lq is not None else None
        return ConditionBundle(prompt_tokens, id_tokens, feats, id_keep)

    def predict_eps(self, z_t: Tensor, t, cond: ConditionBundle) -> Tensor:
        return self.denoiser(z_t, t, cond)

    # checkpoints
    def save(self, path: str, header: dict, extra_tensors: dict | None = None) -> None:
        header = dict(header, denoiser_config=config_dict(self.cfg))
        save_checkpoint(path, {"denoiser": self.denoiser, "projector": self.projector,
                               "face_encoder": self.face_encoder}, header, extra_tensors)

    @classmethod
    def load(cls, path: str, expect: DenoiserConfig | None = None) -> tuple["RestorationModel", dict]:
        header, state = load_checkpoint(path)
        cfg = DenoiserConfig.from_dict(header["denoiser_config"])
        if expect is not None and config_dict(expect) != config_dict(cfg):
            raise CheckpointError("checkpoint config does not match the requested config")
        model = cls(cfg)
        model.denoiser.load_state_dict(submodule_state(state, "denoiser"))
        model.projector.load_state_dict(submodule_state(state, "projector"))
        model.face_encoder.load_state_dict(submodule_state(state, "face_encoder"))
        model.eval()
        model.trained = True
        return model, header


def image_batch(images) -> Tensor:
    """Stack uint8 images (B, H, W) into (B, 1, H, W) tensors in [-1, 1]."""
    return to_unit_range(np.asarray(images, dtype=np.float32))


def to_uint8(x: Tensor) -> np.ndarray:
    """Model-space (B, 1, H, W) in [-1, 1] -> uint8 (B, H, W)."""
    v = ((x.detach().double().clamp(-1, 1) + 1) * 127.5).round()
    return v[:, 0].numpy().astype(np.uint8)


def generic_tokens(batch: int) -> Tensor:
    return prompts.pad_batch([prompts.generic_prompt()] * batch)
