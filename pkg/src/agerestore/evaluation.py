"""Restoration metrics, identity-attention heatmaps and run reports."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from . import synthface as sf
from .degrade import gaussian_kernel, psnr
from .oracles import AgeOracle, IdentityOracle, age_oracle, identity_oracle

PSNR_CAP = 100.0
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2
EXCLUDED_METRICS = ("lpips", "fid", "musiq")


class HeatmapUnavailableError(RuntimeError):
    pass


class MissingOutputsError(FileNotFoundError):
    def __init__(self, missing: list[str]):
        super().__init__(f"{len(missing)} restored images missing: " + ", ".join(missing))
        self.missing = missing


@dataclass
class Oracles:
    age: AgeOracle
    identity: IdentityOracle


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over valid 11x11 Gaussian (sigma 1.5) windows on the 8-bit range."""
    x, y = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if x.shape != y.shape:
        raise ValueError("images must share a shape")
    k = gaussian_kernel(1.5)  # 11 taps

    def filt(img):
        out = ndimage.correlate1d(img, k, axis=0, mode="constant")
        out = ndimage.correlate1d(out, k, axis=1, mode="constant")
        return out[5:-5, 5:-5]

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


def compute_metrics_batch(restored: np.ndarray, ground_truth: np.ndarray, references: list[np.ndarray],
                          target_ages, oracles: Oracles) -> list[dict]:
    """Per-instance metrics; ``references[i]`` is the (R_i, H, W) stack for instance ``i``."""
    restored = np.asarray(restored)
    ground_truth = np.asarray(ground_truth)
    ids_gt = identity_oracle(restored, ground_truth, oracles.identity).numpy()
    ages = age_oracle(restored, oracles.age).numpy()
    out = []
    for i in range(len(restored)):
        refs = np.asarray(references[i])
        sims = identity_oracle(np.repeat(restored[i][None], len(refs), 0), refs, oracles.identity)
        out.append({
            "psnr": psnr(restored[i], ground_truth[i], PSNR_CAP),
            "ssim": ssim(restored[i], ground_truth[i]),
            "ids": float(ids_gt[i]),
            "ids_best_ref": float(sims.max()),
            "age_pred": float(ages[i]),
            "age_target": float(target_ages[i]),
        })
    return out


def compute_metrics(restored, ground_truth, references, target_age: float, oracles: Oracles) -> dict:
    """PSNR, SSIM, identity similarity (to ground truth and best reference) and predicted age."""
    if len(references) == 0:
        raise ValueError("at least one reference is required")
    return compute_metrics_batch(np.asarray(restored)[None], np.asarray(ground_truth)[None],
                                 [np.stack(references)], [target_age], oracles)[0]


def attention_heatmap(trace: dict, index: int = 0, normalize: bool = True) -> np.ndarray:
    """Average the recorded identity-attention share over sampling steps as a square map.

    Each step's map is scaled to sum to one before averaging; the result is then divided by
    its maximum when ``normalize`` is set.
    """
    steps = trace.get("heatmaps")
    if not steps:
        raise HeatmapUnavailableError("sampling run was not recorded with record_heatmaps=True")
    maps = torch.stack([s[index] for s in steps]).double()
    maps = maps / maps.sum(-1, keepdim=True)
    avg = maps.mean(0).numpy()
    side = int(round(math.sqrt(avg.size)))
    avg = avg.reshape(side, side)
    return avg / avg.max() if normalize else avg


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


# --- run reports -----------------------------------------------------------

def output_name(index: int, record: sf.ManifestRecord) -> str:
    return f"{index:05d}_{record.identity_id}.png"


def sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def manifest_hash(manifest: sf.RunManifest) -> str:
    return sha256_json({"split": manifest.split, "records": [r.__dict__ for r in manifest.records]})


def _aggregate(rows: list[dict]) -> dict:
    return {
        "count": len(rows),
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
        "ids": float(np.mean([r["ids"] for r in rows])),
        "ids_best_ref": float(np.mean([r["ids_best_ref"] for r in rows])),
        "age_signed_error": float(np.mean([r["age_pred"] - r["age_target"] for r in rows])),
        "AGE": float(np.mean([abs(r["age_pred"] - r["age_target"]) for r in rows])),
        **{k: None for k in EXCLUDED_METRICS},
    }


def _rounded(obj, digits: int = 6):
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: _rounded(v, digits) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_rounded(v, digits) for v in obj]
    return obj


def evaluate_run(manifest: sf.RunManifest, output_dir: str, oracles: Oracles, config: dict | None = None,
                 out_path: str | None = None) -> dict:
    """Score every restored image of a run against its manifest record.

    Restored images are expected at ``output_dir/output_name(i, record)``. The report is
    written as sorted, indented JSON to ``out_path`` when given.

    Raises:
        ValueError: The manifest is empty.
        MissingOutputsError: Some records have no restored image (all are listed).
    """
    if not manifest.records:
        raise ValueError("manifest has no records")
    names = [output_name(i, r) for i, r in enumerate(manifest.records)]
    missing = [n for n in names if not os.path.exists(os.path.join(output_dir, n))]
    if missing:
        raise MissingOutputsError(missing)
    restored = np.stack([sf.load_png(os.path.join(output_dir, n)) for n in names])
    gt = np.stack([sf.load_png(manifest.path(r.gt_path)) for r in manifest.records])
    refs = [np.stack([sf.load_png(manifest.path(p)) for p in r.ref_paths]) for r in manifest.records]
    rows = compute_metrics_batch(restored, gt, refs, [r.gt_age for r in manifest.records], oracles)
    for row, r, n in zip(rows, manifest.records, names):
        row.update(output=n, identity_id=r.identity_id, gap_bucket=r.gap_bucket)
    report = {
        "split": manifest.split,
        "manifest_hash": manifest_hash(manifest),
        "config_hash": sha256_json(config or {}),
        "aggregate": _aggregate(rows),
        "instances": rows,
    }
    buckets = [b for b in sf.GAP_BUCKETS if any(r["gap_bucket"] == b for r in rows)]
    if buckets:
        report["buckets"] = {b: _aggregate([r for r in rows if r["gap_bucket"] == b]) for b in buckets}
    report = _rounded(report)
    if out_path:
        sf._atomic_write(out_path, dumps_report(report).encode())
    return report


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1) + "\n"


def render_table(rows: dict[str, dict], columns=("psnr", "ssim", "ids", "ids_best_ref", "AGE")) -> str:
    """Plain-text table: one line per named aggregate row."""
    width = max(12, *(len(k) for k in rows))
    head = f"{'':<{width}}" + "".join(f"{c:>14}" for c in columns)
    lines = [head, "-" * len(head)]
    for name, agg in rows.items():
        cells = "".join(f"{agg[c]:>14.4f}" if agg.get(c) is not None else f"{'-':>14}" for c in columns)
        lines.append(f"{name:<{width}}" + cells)
    return "\n".join(lines)
