"""Interface for plugging in a pre-trained image-to-video latent U-Net.

No weights ship with this package. The class documents how the layer keys
map onto a diffusers-style spatio-temporal U-Net and what an implementation
has to provide; calling it raises ``NotImplementedError``.

Layer mapping (up path, lower to higher resolution):

=================  ===============================================
key                module path
=================  ===============================================
bottom.*.i         ``up_blocks.1`` (i-th transformer / resnet)
mid.*.i            ``up_blocks.2``
top.*.i            ``up_blocks.3``
spatial_attn       ``attentions[i-1].transformer_blocks[0].attn1``
temporal_attn      ``attentions[i-1].temporal_transformer_blocks[0].attn1``
upsample_block     ``resnets[i-1]`` output
=================  ===============================================

Latents have 4 channels at 1/8 of the image resolution. The EDM
preconditioning constants (``c_skip``, ``c_out``, ``c_in``, ``c_noise``) must
be read from the model's scheduler config; they are not hard-coded here.
The reference learning rate for this latent scale is 0.21.
"""

from __future__ import annotations

from typing import Sequence

from torch import Tensor

from .base import DenoiserBackend, FeatureMapSet, LatentVideo, LayerKey, all_layer_keys

LATENT_SCALE = 8
LATENT_CHANNELS = 4

MODULE_PATHS = {
    "bottom": "up_blocks.1",
    "mid": "up_blocks.2",
    "top": "up_blocks.3",
    "spatial_attn": "attentions[{i}].transformer_blocks[0].attn1",
    "temporal_attn": "attentions[{i}].temporal_transformer_blocks[0].attn1",
    "upsample_block": "resnets[{i}]",
}


def module_path(key: LayerKey) -> str:
    """Dotted module path of ``key`` in a diffusers-style video U-Net."""
    return f"{MODULE_PATHS[key.stage]}.{MODULE_PATHS[key.kind].format(i=key.index - 1)}"


class PretrainedVideoAdapter(DenoiserBackend):
    name = "adapter"

    def __init__(self, path: str, image_hw: tuple[int, int] = (576, 1024)):
        latent_hw = (image_hw[0] // LATENT_SCALE, image_hw[1] // LATENT_SCALE)
        super().__init__(LATENT_CHANNELS, latent_hw)
        self.path = path

    @property
    def layers(self) -> tuple[LayerKey, ...]:
        return all_layer_keys()

    def config(self) -> dict:
        return {"name": self.name, "path": self.path, "latent_hw": list(self.latent_hw)}

    def _predict(self, latent: LatentVideo) -> Tensor:
        raise NotImplementedError(f"no pre-trained model is bundled; cannot load {self.path!r}")

    def _features(self, latent: LatentVideo, layers: Sequence[LayerKey], aligned: bool) -> list[FeatureMapSet]:
        raise NotImplementedError(f"no pre-trained model is bundled; cannot load {self.path!r}")
