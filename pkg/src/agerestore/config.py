"""Application config: one strict JSON file with data, oracle, model, training and guidance sections."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

from .denoiser import DenoiserConfig
from .guidance import GuidanceConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    world_seed: int = 0
    size: int = 32
    train_ids: int = 300
    train_imgs_per_id: int = 6
    test_ids: int = 50
    test_imgs_per_id: int = 4
    cross_age_gap: float = 26.0
    bucket_ids: int = 20
    seed: int = 0


@dataclass
class OracleConfig:
    age_steps: int = 1500
    identity_steps: int = 1500
    encoder_steps: int = 1500
    n_ids: int = 300
    per_id: int = 10


def _prior_default() -> TrainConfig:
    return TrainConfig(stage="prior", lr=2e-3, batch_size=32, max_steps=2000, warmup_steps=100,
                       eval_every=0, checkpoint_every=500, checkpoint_dir="", seed=0, lq_dropout_p=0.1,
                       loss_weighting="v")


def _identity_default() -> TrainConfig:
    return TrainConfig(stage="identity", lr=3e-3, batch_size=32, max_steps=1200, warmup_steps=50,
                       eval_every=200, checkpoint_every=200, checkpoint_dir="", seed=1, loss_weighting="v")


def _guidance_default() -> GuidanceConfig:
    # Toy world: identity CFG and negative descriptors both push ages older, see README.
    return GuidanceConfig(cfg_scale=1.0, negative_descriptors=False)


@dataclass
class AppConfig:
    root: str = "workspace"
    data: DataConfig = field(default_factory=DataConfig)
    oracles: OracleConfig = field(default_factory=OracleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    prior: TrainConfig = field(default_factory=_prior_default)
    identity: TrainConfig = field(default_factory=_identity_default)
    guidance: GuidanceConfig = field(default_factory=_guidance_default)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        """Content hash of everything except the workspace root."""
        d = self.to_dict()
        d.pop("root")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def path(self, *parts: str) -> str:
        return os.path.join(self.root, *parts)

    @classmethod
    def from_dict(cls, d: dict) -> "AppConfig":
        sections = {"data": DataConfig, "oracles": OracleConfig, "denoiser": DenoiserConfig,
                    "prior": TrainConfig, "identity": TrainConfig, "guidance": GuidanceConfig}
        unknown = set(d) - set(sections) - {"root"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        base = cls()
        kw = {"root": d.get("root", base.root)}
        for name, typ in sections.items():
            given = d.get(name, {})
            names = {f.name for f in fields(typ)}
            bad = set(given) - names
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            merged = dict(asdict(getattr(base, name)), **given)
            try:
                kw[name] = typ(**merged)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid [{name}] section: {exc}") from exc
        return cls(**kw)

    @classmethod
    def load(cls, path: str) -> "AppConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
