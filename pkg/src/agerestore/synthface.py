"""Procedural face world with exact identity and age ground truth.

A face is a superellipse head with hair cap, eyes, brows, nose, mouth and a mole,
all placed by a 16-factor identity vector. Age controls a fixed set of wrinkle
strokes (opacity linear in age), hair greying and face elongation.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

K_ID = 16
SUPERSAMPLE = 2
WRINKLE_OPACITY = 0.6
POSE_RANGE = 0.03
ILLUM_RANGE = (0.85, 1.15)

# identity-id ranges per purpose; disjoint by construction
ID_BASE = {
    "train_same_age": 0,
    "test_same_age": 100_000,
    "test_cross_age": 200_000,
    "oracle": 300_000,
    "oracle_eval": 400_000,
    "encoder": 500_000,
    "encoder_eval": 600_000,
    "prior": 700_000,
}
SPLITS = ("train_same_age", "test_same_age", "test_cross_age")


class SpecError(ValueError):
    pass


@dataclass
class FaceSpec:
    identity: np.ndarray  # (K_ID,) in [-1, 1]
    age: float
    pose: tuple[float, float] = (0.0, 0.0)
    illumination: float = 1.0
    background_seed: int = 0

    def validate(self):
        ident = np.asarray(self.identity, dtype=np.float64)
        if ident.shape != (K_ID,) or np.any(np.abs(ident) > 1):
            raise SpecError(f"identity must be {K_ID} values in [-1, 1]")
        if not 0 <= self.age <= 100:
            raise SpecError(f"age {self.age} outside [0, 100]")
        if max(abs(self.pose[0]), abs(self.pose[1])) > POSE_RANGE + 1e-12:
            raise SpecError("pose jitter out of range")
        if not ILLUM_RANGE[0] <= self.illumination <= ILLUM_RANGE[1]:
            raise SpecError("illumination out of range")


def identity_vector(world_seed: int, identity_id: int) -> np.ndarray:
    rng = np.random.default_rng([world_seed, identity_id, 7])
    return rng.uniform(-1, 1, K_ID)


def random_nuisance(rng: np.random.Generator) -> dict:
    return dict(
        pose=(float(rng.uniform(-POSE_RANGE, POSE_RANGE)), float(rng.uniform(-POSE_RANGE, POSE_RANGE))),
        illumination=float(rng.uniform(*ILLUM_RANGE)),
        background_seed=int(rng.integers(0, 2**31 - 1)),
    )


def _soft(d, w):
    # soft inside-indicator for signed distance d (negative inside)
    return 1.0 / (1.0 + np.exp(np.clip(d / w, -50, 50)))


def _segment_dist(u, v, p0, p1):
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    d = p1 - p0
    s = np.clip(((u - p0[0]) * d[0] + (v - p0[1]) * d[1]) / (d @ d), 0, 1)
    return np.hypot(u - p0[0] - s * d[0], v - p0[1] - s * d[1])


def _stroke(u, v, segments, width, edge):
    dist = np.full(u.shape, np.inf)
    for p0, p1 in segments:
        dist = np.minimum(dist, _segment_dist(u, v, p0, p1))
    return _soft(dist - width, edge)


def _layers(spec: FaceSpec, n: int) -> dict[str, np.ndarray]:
    k = np.asarray(spec.identity, dtype=np.float64)
    age = float(spec.age)
    edge = 0.6 / n
    v, u = (np.mgrid[0:n, 0:n] + 0.5) / n
    cx = 0.5 + spec.pose[0]
    cy = 0.54 + spec.pose[1]

    a = 0.28 + 0.035 * k[0]
    b = 0.34 + 0.03 * k[1] + 0.04 * age / 100
    p = 2.2 + 0.6 * k[2]
    r = (np.abs((u - cx) / a) ** p + np.abs((v - cy) / b) ** p) ** (1 / p)
    face = _soft((r - 1) * min(a, b), edge)

    hairline = cy - b * (0.55 + 0.15 * k[5])
    rh = np.hypot((u - cx) / (a + 0.05), (v - cy + 0.01) / (b + 0.06))
    head = _soft((rh - 1) * a, edge)
    hair = head * _soft(v - hairline, edge) * (1 - face * _soft(hairline - v + 0.02, edge))
    hair = np.clip(np.maximum(hair, head * (1 - face)) * _soft(v - cy, edge), 0, 1)

    eye_y = cy - 0.10 + 0.03 * k[6]
    eye_dx = 0.11 + 0.025 * k[7]
    erx = 0.05 + 0.014 * k[8]
    ery = 0.55 * erx
    eyes = np.zeros_like(u)
    for sgn in (-1, 1):
        re = np.hypot((u - cx - sgn * eye_dx) / erx, (v - eye_y) / ery)
        eyes = np.maximum(eyes, _soft((re - 1) * ery, edge))

    brow_y = eye_y - 0.07
    brow_w = 0.016 + 0.008 * k[9]
    tilt = 0.035 * k[10]
    brows = _stroke(u, v, [((cx - sgn * (eye_dx + 0.06), brow_y + tilt), (cx - sgn * (eye_dx - 0.05), brow_y - tilt))
                          for sgn in (-1, 1)], brow_w, edge)

    nose_top = eye_y + 0.03
    nose_end = cy + 0.07 + 0.03 * k[11]
    nose_w = 0.013 + 0.007 * k[12]
    nose = _stroke(u, v, [((cx, nose_top), (cx, nose_end)),
                          ((cx - 0.03, nose_end), (cx + 0.03, nose_end))], nose_w, edge)

    mouth_y = cy + 0.17
    mw = 0.08 + 0.03 * k[13]
    curve = 0.035 * k[14]
    xs = np.linspace(-mw, mw, 7)
    pts = [(cx + x, mouth_y - curve * (1 - (x / mw) ** 2)) for x in xs]
    mouth = _stroke(u, v, list(zip(pts[:-1], pts[1:])), 0.016, edge)

    ang = np.pi * (0.15 + 0.7 * (k[15] + 1) / 2)
    mx, my = cx + 0.17 * np.cos(ang) * np.sign(k[3] + 1e-9), cy + 0.05 + 0.06 * np.sin(ang)
    mole = _soft(np.hypot(u - mx, v - my) - 0.022, edge)

    wr = []
    for dy in (0.12, 0.165, 0.21):
        wr.append(((cx - 0.13, eye_y - dy - 0.01), (cx + 0.13, eye_y - dy + 0.01)))
    for sgn in (-1, 1):
        ex = cx + sgn * (eye_dx + erx + 0.01)
        for dy in (-0.035, 0.0, 0.035):
            wr.append(((ex, eye_y + dy * 0.6), (ex + sgn * 0.06, eye_y + dy * 1.6)))
        wr.append(((cx + sgn * 0.05, nose_end + 0.01), (cx + sgn * (mw + 0.03), mouth_y + 0.03)))
        wr.append(((cx + sgn * (eye_dx - 0.02), eye_y + ery + 0.025), (cx + sgn * (eye_dx + 0.04), eye_y + ery + 0.03)))
    wrinkles = _stroke(u, v, wr, 0.009, edge) * face

    return dict(face=face, hair=hair, head=np.clip(np.maximum(face, hair), 0, 1), eyes=eyes * face,
                brows=brows * face, nose=nose * face, mouth=mouth * face, mole=mole * face,
                wrinkles=wrinkles, u=u, v=v)


def _background(spec: FaceSpec, u, v):
    rng = np.random.default_rng(spec.background_seed)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(1.5, 4)
    phase = rng.uniform(0, 2 * np.pi)
    base = rng.uniform(0.3, 0.45)
    return base + 0.07 * np.sin(2 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)) + phase)


def _downsample(x: np.ndarray, f: int) -> np.ndarray:
    n = x.shape[0] // f
    return x.reshape(n, f, n, f).mean(axis=(1, 3))


def wrinkle_mass(spec: FaceSpec, size: int = 32) -> float:
    """Total wrinkle opacity over the face at render resolution."""
    spec.validate()
    L = _layers(spec, size * SUPERSAMPLE)
    return float(_downsample(L["wrinkles"], SUPERSAMPLE).sum() * WRINKLE_OPACITY * spec.age / 100)


def render_face(spec: FaceSpec, size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Render an 8-bit grayscale face and its exact binary foreground (head) mask."""
    if size < 16:
        raise SpecError("size must be >= 16")
    spec.validate()
    n = size * SUPERSAMPLE
    k = np.asarray(spec.identity, dtype=np.float64)
    L = _layers(spec, n)
    age = spec.age / 100

    skin = 0.62 + 0.12 * k[3]
    img = _background(spec, L["u"], L["v"])
    hair_tone = 0.16 + 0.10 * (k[4] + 1) + (0.88 - 0.16 - 0.10 * (k[4] + 1)) * np.clip((spec.age - 30) / 60, 0, 1)
    img = img * (1 - L["hair"]) + hair_tone * L["hair"]
    img = img * (1 - L["face"]) + skin * L["face"]
    img = img * (1 - L["wrinkles"] * WRINKLE_OPACITY * age)
    img = img * (1 - 0.25 * L["nose"])
    img = img * (1 - 0.7 * L["brows"])
    img = img * (1 - 0.55 * L["mouth"])
    img = img * (1 - 0.6 * L["mole"])
    img = img * (1 - L["eyes"]) + 0.08 * L["eyes"]
    img = img * spec.illumination

    img = _downsample(img, SUPERSAMPLE)
    mask = _downsample(L["head"], SUPERSAMPLE) > 0.5
    out = np.clip(np.floor(img * 255 + 0.5), 0, 255).astype(np.uint8)
    return out, mask


def sample_spec(rng: np.random.Generator, identity: np.ndarray, age: float) -> FaceSpec:
    return FaceSpec(identity=identity, age=float(age), **random_nuisance(rng))


# --- datasets --------------------------------------------------------------

@dataclass
class ManifestRecord:
    identity_id: int
    gt_path: str
    ref_paths: list[str]
    gt_age: float
    ref_ages: list[float]
    degradation_seed: int
    gap_bucket: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class RunManifest:
    split: str
    records: list[ManifestRecord] = field(default_factory=list)
    root: str = "."

    def mean_age_gap(self) -> float:
        gaps = [abs(r.gt_age - a) for r in self.records for a in r.ref_ages]
        return float(np.mean(gaps)) if gaps else 0.0

    def identity_ids(self) -> set[int]:
        return {r.identity_id for r in self.records}

    def path(self, rel: str) -> str:
        return os.path.join(self.root, rel)

    def save(self, path: str) -> None:
        header = json.dumps({"split": self.split}, sort_keys=True)
        _atomic_write(path, "\n".join([header] + [r.to_json() for r in self.records]) + "\n")

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        with open(path) as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        if not lines:
            raise ValueError(f"empty manifest {path}")
        header = json.loads(lines[0])
        recs = [ManifestRecord(**json.loads(ln)) for ln in lines[1:]]
        return cls(header["split"], recs, root=os.path.dirname(os.path.abspath(path)))


def _atomic_write(path: str, text: str | bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(text.encode() if isinstance(text, str) else text)
    os.replace(tmp, path)


def save_png(path: str, img: np.ndarray) -> None:
    from PIL import Image
    import io

    buf = io.BytesIO()
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(buf, format="PNG")
    _atomic_write(path, buf.getvalue())


def load_png(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def load_mask(path: str) -> np.ndarray:
    return load_png(path) > 127


def _mask_path(img_path: str) -> str:
    root, ext = os.path.splitext(img_path)
    return root + "_mask" + ext


class GapError(ValueError):
    pass


GAP_BUCKETS = {"<=10": (0, 10), "10-20": (10, 20), "20-30": (20, 30), "30-40": (30, 40), ">40": (40, 60)}


def _cross_age_ages(rng, n_refs, gap, max_tries=200):
    for _ in range(max_tries):
        gt = float(rng.integers(0, 101))
        ok = [a for a in range(0, 101) if abs(a - gt) >= gap]
        if len(ok) >= 1:
            refs = [float(x) for x in rng.choice(ok, size=n_refs, replace=len(ok) < n_refs)]
            return gt, refs
    raise GapError(f"cannot satisfy age gap {gap}")


def build_dataset(n_ids: int, imgs_per_id: int, split: str, age_gap: float = 26.0, seed: int = 0,
                  out_dir: str | None = None, size: int = 32, world_seed: int = 0,
                  gap_buckets: bool = False, id_offset: int = 0) -> RunManifest:
    """Render a split and write images plus ``manifest.jsonl`` under ``out_dir``.

    Same-age splits keep each identity within +-5 years; the cross-age split puts
    every reference at least ``age_gap`` years from the ground truth. With
    ``gap_buckets`` each cross-age identity instead gets one record per age-gap bucket
    sharing a single ground truth. ``id_offset`` shifts the identity range, e.g. for a
    validation split drawn from the same distribution as a test split.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if n_ids < 1:
        raise ValueError("n_ids must be >= 1")
    if split == "test_cross_age" and not gap_buckets and age_gap > 100:
        raise GapError(f"age gap {age_gap} unsatisfiable in [0, 100]")
    rng = np.random.default_rng([seed, SPLITS.index(split)])
    manifest = RunManifest(split, root=out_dir or ".")
    if out_dir:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)

    def emit(name, spec):
        img, mask = render_face(spec, size)
        rel = f"images/{name}.png"
        if out_dir:
            save_png(os.path.join(out_dir, rel), img)
            save_png(os.path.join(out_dir, _mask_path(rel)), mask.astype(np.uint8) * 255)
        return rel

    for j in range(n_ids):
        iid = ID_BASE[split] + id_offset + j
        ident = identity_vector(world_seed, iid)
        if split != "test_cross_age":
            base = float(rng.uniform(5, 95))
            ages = [float(np.clip(np.round(base + rng.uniform(-5, 5)), 0, 100)) for _ in range(max(imgs_per_id, 2))]
            paths = [emit(f"{iid}_{i}", sample_spec(rng, ident, a)) for i, a in enumerate(ages)]
            for i in range(len(ages)):
                others = [o for o in range(len(ages)) if o != i]
                n_refs = int(rng.integers(1, min(5, len(others)) + 1))
                pick = sorted(rng.choice(others, size=n_refs, replace=False).tolist())
                manifest.records.append(ManifestRecord(
                    iid, paths[i], [paths[o] for o in pick], ages[i], [ages[o] for o in pick],
                    int(rng.integers(0, 2**31 - 1))))
        elif gap_buckets:
            gt = float(rng.integers(25, 56))
            gt_path = emit(f"{iid}_gt", sample_spec(rng, ident, gt))
            deg_seed = int(rng.integers(0, 2**31 - 1))
            for b, (lo, hi) in GAP_BUCKETS.items():
                cands = [a for a in range(0, 101) if lo < abs(a - gt) <= hi or (lo == 0 and abs(a - gt) <= hi)]
                ra = float(rng.choice(cands))
                rp = emit(f"{iid}_ref_{b.replace('<=', 'le').replace('>', 'gt')}", sample_spec(rng, ident, ra))
                manifest.records.append(ManifestRecord(iid, gt_path, [rp], gt, [ra], deg_seed, gap_bucket=b))
        else:
            for i in range(imgs_per_id):
                n_refs = int(rng.integers(1, 6))
                gt, ref_ages = _cross_age_ages(rng, n_refs, age_gap)
                gt_path = emit(f"{iid}_{i}_gt", sample_spec(rng, ident, gt))
                refs = [emit(f"{iid}_{i}_ref{r}", sample_spec(rng, ident, a)) for r, a in enumerate(ref_ages)]
                manifest.records.append(ManifestRecord(iid, gt_path, refs, gt, ref_ages,
                                                       int(rng.integers(0, 2**31 - 1))))
    if out_dir:
        manifest.save(os.path.join(out_dir, "manifest.jsonl"))
    return manifest
