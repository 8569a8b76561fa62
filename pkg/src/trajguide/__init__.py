"""Zero-shot trajectory control for latent video diffusion by self-guided latent optimization."""

from .attention import aligned_attention, standard_attention
from .backends import LatentVideo, LayerKey, SyntheticBlobDenoiser, ToyUNetDenoiser, make_backend
from .guidance import GuidanceConfig, eq1_loss, optimize_latent
from .sampler import generate, make_schedule
from .spectral import FilterSpec, filter_response, mix_latents
from .trajectory import BoxTrajectory, gaussian_weight, interpolate_trajectory, to_latent_boxes

__version__ = "0.1.0"

__all__ = [
    "BoxTrajectory",
    "FilterSpec",
    "GuidanceConfig",
    "LatentVideo",
    "LayerKey",
    "SyntheticBlobDenoiser",
    "ToyUNetDenoiser",
    "aligned_attention",
    "eq1_loss",
    "filter_response",
    "gaussian_weight",
    "generate",
    "interpolate_trajectory",
    "make_backend",
    "make_schedule",
    "mix_latents",
    "optimize_latent",
    "standard_attention",
    "to_latent_boxes",
]
