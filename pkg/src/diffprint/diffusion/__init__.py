from .models import DenoiserModel, GMMDenoiser, MLPDenoiser, predict_noise
from .sampler import DegenerateModelError, ddim_step, invert, sample, sample_stochastic
from .schedule import NoiseSchedule, build_schedule
from .training import train_mlp_denoiser
from .vae import LatentCodec

__all__ = [
    "DenoiserModel", "GMMDenoiser", "MLPDenoiser", "NoiseSchedule", "DegenerateModelError",
    "build_schedule", "predict_noise", "ddim_step", "sample", "sample_stochastic", "invert",
    "train_mlp_denoiser", "LatentCodec",
]
