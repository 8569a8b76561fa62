"""Analytic backend whose output is a single Gaussian blob per frame.

The blob position is an exact, differentiable function of the latent: the
softmax-weighted center of mass of channel 0. Before the softmax the latent
is preconditioned by ``1 / sqrt(sigma^2 + data_scale^2)`` so pure noise
gives nearly flat weights while a clean blob gives a sharp readout of its
own center. Control error can therefore be measured without a tracker.

Feature tokens per pixel ``p`` of frame ``n`` (blob center ``c_n``):

* values: ``[exp(-|p - c_n|^2 / (2 rho^2)), p_y / h, p_x / w]``
* queries/keys: built from the offset ``p - c_n`` so that ``q . k / sqrt(D)``
  equals ``-beta |delta_p - delta_q|^2 / 2`` up to a per-row constant.

Standard spatial attention then returns a slightly smoothed copy of the
values, and aligned attention returns, for each pixel, the first-frame
values at the same offset from the first frame's blob.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import Tensor

from ..attention import aligned_attention, standard_attention
from .base import BackendError, DenoiserBackend, FeatureMapSet, LatentVideo, LayerKey, all_layer_keys

# coarser attention at lower-resolution stages
_STAGE_SHARPNESS = {"bottom": 0.25, "mid": 1.0, "top": 4.0}


class SyntheticBlobDenoiser(DenoiserBackend):
    name = "blob"
    supports_alignment_mode = True
    supports_analytic_gradient = True

    def __init__(
        self,
        latent_hw: tuple[int, int] = (32, 32),
        channels: int = 4,
        radius: float = 2.5,
        temperature: float = 2.0,
        data_scale: float = 0.05,
        temporal_sharpness: float = 4.0,
    ):
        super().__init__(channels, latent_hw)
        self.radius = radius
        self.temperature = temperature
        self.data_scale = data_scale
        self.temporal_sharpness = temporal_sharpness

    @property
    def layers(self) -> tuple[LayerKey, ...]:
        return all_layer_keys()

    def config(self) -> dict:
        return {
            "name": self.name,
            "latent_hw": list(self.latent_hw),
            "channels": self.channels,
            "radius": self.radius,
            "temperature": self.temperature,
            "data_scale": self.data_scale,
            "temporal_sharpness": self.temporal_sharpness,
        }

    # -- analytic pieces ----------------------------------------------------
    def _grid(self, like: Tensor) -> tuple[Tensor, Tensor]:
        h, w = self.latent_hw
        ys = torch.arange(h, dtype=like.dtype, device=like.device)
        xs = torch.arange(w, dtype=like.dtype, device=like.device)
        return torch.meshgrid(ys, xs, indexing="ij")

    def precondition(self, sigma: float) -> float:
        return 1.0 / math.sqrt(sigma**2 + self.data_scale**2)

    def soft_center(self, latent: LatentVideo) -> Tensor:
        """Blob centers ``(N, 2)`` as ``(y, x)`` pixel indices."""
        z0 = latent.data[:, 0]
        n = z0.shape[0]
        logits = self.precondition(latent.sigma) * z0 / self.temperature
        weights = torch.softmax(logits.reshape(n, -1), dim=-1).reshape_as(z0)
        ys, xs = self._grid(z0)
        return torch.stack([(weights * ys).sum((-2, -1)), (weights * xs).sum((-2, -1))], dim=-1)

    def blob(self, centers: Tensor) -> Tensor:
        """Unit-peak Gaussian blobs ``(N, h, w)`` at ``centers`` (``(N, 2)``, y/x)."""
        ys, xs = self._grid(centers)
        d2 = (ys - centers[:, 0, None, None]) ** 2 + (xs - centers[:, 1, None, None]) ** 2
        return torch.exp(-d2 / (2 * self.radius**2))

    def value_tokens(self, centers: Tensor) -> Tensor:
        """``(N, h*w, 3)``: blob intensity and normalized pixel coordinates."""
        h, w = self.latent_hw
        n = centers.shape[0]
        ys, xs = self._grid(centers)
        g = self.blob(centers).reshape(n, -1, 1)
        coords = torch.stack([ys.reshape(-1) / h, xs.reshape(-1) / w], dim=-1)
        return torch.cat([g, coords.expand(n, -1, -1)], dim=-1)

    def query_key_tokens(self, centers: Tensor, sharpness: float) -> tuple[Tensor, Tensor]:
        ys, xs = self._grid(centers)
        pix = torch.stack([ys.reshape(-1), xs.reshape(-1)], dim=-1)
        delta = pix[None] - centers[:, None, :]
        scale = math.sqrt(sharpness * math.sqrt(3))
        ones = torch.ones_like(delta[..., :1])
        q = scale * torch.cat([delta, ones], dim=-1)
        k = scale * torch.cat([delta, -(delta**2).sum(-1, keepdim=True) / 2], dim=-1)
        return q, k

    # -- contract -----------------------------------------------------------
    def _predict(self, latent: LatentVideo) -> Tensor:
        out = torch.zeros_like(latent.data)
        out[:, 0] = self.blob(self.soft_center(latent))
        return out

    def _features(self, latent: LatentVideo, layers: Sequence[LayerKey], aligned: bool) -> list[FeatureMapSet]:
        h, w = self.latent_hw
        n = latent.num_frames
        centers = self.soft_center(latent)
        values = self.value_tokens(centers)
        out = []
        for key in layers:
            if key.kind == "spatial_attn":
                q, k = self.query_key_tokens(centers, _STAGE_SHARPNESS[key.stage])
                attend = aligned_attention if aligned else standard_attention
                maps = attend(q, k, values)
            elif key.kind == "temporal_attn":
                maps = self._temporal(centers, values)
            elif key.kind == "upsample_block":
                maps = values
            else:  # pragma: no cover - LayerKey validates kinds
                raise BackendError(f"unsupported layer {key}")
            out.append(FeatureMapSet(maps.reshape(n, h, w, -1), key, aligned))
        return out

    def _temporal(self, centers: Tensor, values: Tensor) -> Tensor:
        # tokens are frames, one sequence per pixel
        g = self.blob(centers).reshape(centers.shape[0], -1, 1).transpose(0, 1)
        qk = math.sqrt(self.temporal_sharpness) * g
        mixed = standard_attention(qk, qk, values.transpose(0, 1))
        return mixed.transpose(0, 1)
