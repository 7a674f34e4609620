"""Epistemic uncertainty for diffusion denoisers via randomized Fisher-Laplace subnetworks."""

from .datasets import Dataset, generate
from .denoiser import Architecture, DenoiserModel, ParamVector
from .diffusion import DiffusionSchedule, NoiseRealization, cosine_schedule, make_noise
from .laplace import PosteriorOperator, assemble_ggn, build_posterior
from .uncertainty import EpistemicTrajectory, epistemic_rollout

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "Dataset",
    "DenoiserModel",
    "DiffusionSchedule",
    "EpistemicTrajectory",
    "NoiseRealization",
    "ParamVector",
    "PosteriorOperator",
    "assemble_ggn",
    "build_posterior",
    "cosine_schedule",
    "epistemic_rollout",
    "generate",
    "make_noise",
]
