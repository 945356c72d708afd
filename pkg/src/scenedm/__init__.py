"""Consistent diffusion for joint multi-agent scene futures."""
from .model import DenoiserConfig, SceneDM
from .sampler import RolloutSet, SamplerConfig, sample_scene
from .schedule import NoiseSchedule, make_schedule
from .training import TrainConfig, train

__all__ = [
    "DenoiserConfig", "SceneDM", "RolloutSet", "SamplerConfig", "sample_scene",
    "NoiseSchedule", "make_schedule", "TrainConfig", "train",
]

__version__ = "0.1.0"
