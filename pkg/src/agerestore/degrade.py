"""First-order degradation: blur -> bicubic down -> noise -> block-DCT compression -> bicubic up."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

PAPER_RANGES = {"sigma_blur": (0.2, 10.0), "r": (1.0, 12.0), "delta": (0.0, 15.0), "q": (30, 100)}

# Standard JPEG luminance quantisation table.
JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass(frozen=True)
class DegradationParams:
    sigma_blur: float
    r: float
    delta: float
    q: int

    def to_dict(self) -> dict:
        return asdict(self)


def sample_degradation_params(rng: np.random.Generator, ranges: dict | None = None) -> DegradationParams:
    """Independent uniform draws of (sigma, r, delta) and an integer quality."""
    rg = dict(PAPER_RANGES, **(ranges or {}))
    sigma = rng.uniform(*rg["sigma_blur"])
    r = rng.uniform(*rg["r"])
    delta = rng.uniform(*rg["delta"])
    q = int(rng.integers(rg["q"][0], rg["q"][1] + 1))
    return DegradationParams(float(sigma), float(r), float(delta), q)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    out = ndimage.convolve1d(img, k, axis=0, mode="nearest")
    return ndimage.convolve1d(out, k, axis=1, mode="nearest")


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    w = np.zeros_like(x)
    m1 = x <= 1
    m2 = (x > 1) & (x < 2)
    w[m1] = (a + 2) * x[m1] ** 3 - (a + 3) * x[m1] ** 2 + 1
    w[m2] = a * x[m2] ** 3 - 5 * a * x[m2] ** 2 + 8 * a * x[m2] - 4 * a
    return w


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) Catmull-Rom interpolation matrix with clamped edges."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(int)
    mat = np.zeros((n_out, n_in))
    for off in (-1, 0, 1, 2):
        idx = base + off
        w = _cubic(src - idx)
        np.add.at(mat, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    return mat


def bicubic_resize(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    ry = resample_matrix(img.shape[0], shape[0])
    rx = resample_matrix(img.shape[1], shape[1])
    return ry @ img @ rx.T


def quant_table(q: int) -> np.ndarray:
    q = int(min(max(q, 1), 100))
    scale = 5000 / q if q < 50 else 200 - 2 * q
    return np.clip(np.floor((JPEG_LUMA * scale + 50) / 100), 1, 255)


def block_dct_compress(img: np.ndarray, q: int) -> np.ndarray:
    """8x8 block DCT quantisation with the quality-scaled luminance table (no entropy coding)."""
    h, w = img.shape
    ph, pw = -h % 8, -w % 8
    x = np.pad(img, ((0, ph), (0, pw)), mode="edge") - 128.0
    H, W = x.shape
    blocks = x.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
    table = quant_table(q)
    coef = dctn(blocks, axes=(2, 3), norm="ortho")
    coef = np.round(coef / table) * table
    rec = idctn(coef, axes=(2, 3), norm="ortho")
    rec = rec.transpose(0, 2, 1, 3).reshape(H, W) + 128.0
    return np.clip(np.round(rec), 0, 255)[:h, :w]


def apply_degradation(image: np.ndarray, p: DegradationParams, seed: int = 0) -> np.ndarray:
    """Degrade an 8-bit-range grayscale image; returns float64 in [0, 255] at the input size."""
    if p.r < 1:
        raise ValueError(f"scale factor r must be >= 1, got {p.r}")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    x = gaussian_blur(img, p.sigma_blur) if p.sigma_blur > 0 else img
    small = (max(1, int(round(h / p.r))), max(1, int(round(w / p.r))))
    x = bicubic_resize(x, small) if small != (h, w) else x
    if p.delta > 0:
        x = x + np.random.default_rng(seed).normal(0.0, p.delta, x.shape)
    x = block_dct_compress(np.clip(x, 0, 255), p.q)
    x = bicubic_resize(x, (h, w)) if small != (h, w) else x
    return np.clip(x, 0, 255)


def psnr(a: np.ndarray, b: np.ndarray, cap: float = 100.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return cap
    return min(cap, 10 * math.log10(255.0**2 / mse))
