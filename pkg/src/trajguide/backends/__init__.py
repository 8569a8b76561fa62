from .adapter import PretrainedVideoAdapter, module_path
from .base import (
    KINDS,
    STAGES,
    BackendError,
    DenoiserBackend,
    FeatureMapSet,
    LatentVideo,
    LayerKey,
    all_layer_keys,
    gradient_of,
    parse_layers,
)
from .blob import SyntheticBlobDenoiser
from .toy_unet import ToyUNet, ToyUNetDenoiser


def make_backend(name: str, latent_hw: tuple[int, int], channels: int = 4, seed: int = 0) -> DenoiserBackend:
    """Backend by spec name: ``blob``, ``toy_unet`` or ``adapter:<path>``."""
    if name == "blob":
        return SyntheticBlobDenoiser(tuple(latent_hw), channels)
    if name == "toy_unet":
        return ToyUNetDenoiser(tuple(latent_hw), channels, seed=seed)
    if name.startswith("adapter:"):
        return PretrainedVideoAdapter(name.split(":", 1)[1])
    raise BackendError(f"unknown backend {name!r}")


__all__ = [
    "KINDS",
    "STAGES",
    "BackendError",
    "DenoiserBackend",
    "FeatureMapSet",
    "LatentVideo",
    "LayerKey",
    "PretrainedVideoAdapter",
    "SyntheticBlobDenoiser",
    "ToyUNet",
    "ToyUNetDenoiser",
    "all_layer_keys",
    "gradient_of",
    "make_backend",
    "module_path",
    "parse_layers",
]
