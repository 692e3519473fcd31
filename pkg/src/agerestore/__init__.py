"""Reference-based face restoration with identity conditioning and age-aware guidance (toy scale)."""

from .config import AppConfig, DataConfig, OracleConfig
from .denoiser import ConditionBundle, Denoiser, DenoiserConfig
from .diffusion import NoiseSchedule, ddim_step, forward_diffuse, make_noise_schedule
from .guidance import GuidanceConfig, aagg_sample, age_gradient
from .model import RestorationModel
from .training import TrainConfig, run_training, training_step

__all__ = [
    "AppConfig", "ConditionBundle", "DataConfig", "Denoiser", "DenoiserConfig", "GuidanceConfig",
    "NoiseSchedule", "OracleConfig", "RestorationModel", "TrainConfig", "aagg_sample", "age_gradient",
    "ddim_step", "forward_diffuse", "make_noise_schedule", "run_training", "training_step",
]
