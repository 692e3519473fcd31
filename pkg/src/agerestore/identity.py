"""Identity embeddings from masked reference faces and their projection to attention tokens."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn


class DegenerateInputError(ValueError):
    pass


def to_unit_range(img) -> Tensor:
    """uint8-range image(s) -> float tensor in [-1, 1] with a channel axis."""
    t = torch.as_tensor(np.asarray(img), dtype=torch.float32)
    if t.ndim == 2:
        t = t[None]
    if t.ndim == 3:
        t = t[:, None] if t.shape[0] != 1 else t[None]
    return t / 127.5 - 1


def apply_mask(image, mask) -> np.ndarray:
    """Zero the background; idempotent."""
    m = np.asarray(mask, dtype=bool)
    img = np.asarray(image)
    if m.shape != img.shape[-2:]:
        raise ValueError("mask not aligned with image")
    if not m.any():
        raise DegenerateInputError("mask is empty")
    return np.where(m, img, 0).astype(img.dtype)


class FaceEncoder(nn.Module):
    """Toy face-recognition network: masked 32x32 face -> D_id feature."""

    def __init__(self, id_dim: int = 64, width: int = 32, image_size: int = 32):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(1, w // 2, 3, padding=1), nn.GroupNorm(4, w // 2), nn.SiLU(),
            nn.Conv2d(w // 2, w, 3, stride=2, padding=1), nn.GroupNorm(8, w), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.GroupNorm(8, 2 * w), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), nn.GroupNorm(8, 2 * w), nn.SiLU(),
            nn.Flatten(),
        )
        self.head = nn.Linear(2 * w * (image_size // 8) ** 2, id_dim)
        self.id_dim = id_dim

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.net(x))


@torch.no_grad()
def embed_identity(image, mask, encoder: FaceEncoder) -> Tensor:
    """Unit-norm identity embedding of one face (background removed first)."""
    masked = apply_mask(image, mask)
    encoder.eval()
    e = encoder(to_unit_range(masked))[0]
    return F.normalize(e.double(), dim=0).float()


def embed_batch(images: np.ndarray, masks: np.ndarray, encoder: FaceEncoder) -> Tensor:
    """(B, H, W) images and masks -> (B, D_id) unit embeddings, differentiable w.r.t. encoder."""
    m = np.asarray(masks, dtype=bool)
    if not m.reshape(len(m), -1).any(1).all():
        raise DegenerateInputError("mask is empty")
    x = to_unit_range(np.where(m, images, 0).astype(np.uint8))
    return F.normalize(encoder(x), dim=-1)


def average_embeddings(embeddings) -> Tensor:
    """Mean of unit embeddings, renormalised to unit length."""
    if len(embeddings) == 0:
        raise ValueError("need at least one embedding")
    stack = torch.stack([torch.as_tensor(e) for e in embeddings]) if not isinstance(embeddings, Tensor) else embeddings
    if stack.ndim != 2:
        raise ValueError("embeddings must share one dimension")
    if len(stack) == 1:
        return stack[0]
    mean = stack.double().mean(0)
    norm = mean.norm()
    if norm < 1e-6:
        raise DegenerateInputError("antipodal collapse: embeddings average to zero")
    return (mean / norm).to(stack.dtype)


class TokenProjector(nn.Module):
    """Two-layer perceptron mapping an identity embedding to N tokens of width D."""

    def __init__(self, id_dim: int = 64, n_tokens: int = 16, dim: int = 64, hidden: int = 256):
        super().__init__()
        self.n_tokens, self.dim = n_tokens, dim
        self.fc1 = nn.Linear(id_dim, hidden)
        self.fc2 = nn.Linear(hidden, n_tokens * dim)

    def forward(self, e: Tensor) -> Tensor:
        if e.shape[-1] != self.fc1.in_features:
            raise ValueError(f"embedding dim {e.shape[-1]} != {self.fc1.in_features}")
        squeeze = e.ndim == 1
        e = e[None] if squeeze else e
        f = self.fc2(F.gelu(self.fc1(e))).view(len(e), self.n_tokens, self.dim)
        return f[0] if squeeze else f


def project_tokens(e: Tensor, proj: TokenProjector) -> Tensor:
    return proj(e)
