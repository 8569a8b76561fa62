"""Denoiser contract shared by every backend.

A backend predicts the clean video from a noisy latent (denoised-sample
parameterization, so any preconditioning stays inside the backend) and can
run a separate *guidance pass* that returns feature maps from named layers,
optionally with first-frame key/value substitution in spatial attention.
Guidance passes never touch state used by the generation pass.
"""

from __future__ import annotations

import abc
import re
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import torch
from torch import Tensor

STAGES = ("bottom", "mid", "top")
KINDS = ("spatial_attn", "temporal_attn", "upsample_block")

_SHORT_STAGE = {"B": "bottom", "M": "mid", "T": "top"}


class BackendError(RuntimeError):
    """Raised on contract violations: bad shapes, unknown layers, missing capabilities."""


@dataclass(frozen=True, order=True)
class LayerKey:
    stage: str
    kind: str
    index: int

    def __post_init__(self):
        if self.stage not in STAGES:
            raise BackendError(f"unknown stage {self.stage!r}, expected one of {STAGES}")
        if self.kind not in KINDS:
            raise BackendError(f"unknown layer kind {self.kind!r}, expected one of {KINDS}")
        if not 1 <= self.index <= 3:
            raise BackendError(f"layer index must be in 1..3, got {self.index}")

    def __str__(self):
        return f"{self.stage}.{self.kind}.{self.index}"

    def with_kind(self, kind: str) -> "LayerKey":
        return replace(self, kind=kind)

    @classmethod
    def parse(cls, text: str) -> "LayerKey":
        """Parse ``"mid.spatial_attn.2"``."""
        parts = text.split(".")
        if len(parts) != 3 or not parts[2].isdigit():
            raise BackendError(f"cannot parse layer key {text!r}")
        return cls(parts[0], parts[1], int(parts[2]))


def parse_layers(spec: str | Sequence[str], kind: str = "spatial_attn") -> list[LayerKey]:
    """Parse a layer selection.

    Accepts a list of full keys, or the shorthand used in layer ablations:
    ``"M2-3"`` (mid stage, indices 2 and 3), ``"B1"``, ``"T1-3"``; several
    shorthands may be joined with ``+``.
    """
    if not isinstance(spec, str):
        return [LayerKey.parse(s) for s in spec]
    keys = []
    for part in spec.split("+"):
        m = re.fullmatch(r"([BMT])(\d)(?:-(\d))?", part.strip())
        if m is None:
            raise BackendError(f"cannot parse layer shorthand {part!r}")
        lo = int(m.group(2))
        hi = int(m.group(3) or lo)
        keys += [LayerKey(_SHORT_STAGE[m.group(1)], kind, i) for i in range(lo, hi + 1)]
    return keys


@dataclass
class LatentVideo:
    """Noisy latent ``(N, C, h, w)`` at noise level ``sigma``, plus the clean conditioning frame ``(C, h, w)``."""

    data: Tensor
    sigma: float
    conditioning: Tensor

    def __post_init__(self):
        if self.data.dim() != 4 or min(self.data.shape) < 1:
            raise BackendError(f"latent must be (N, C, h, w) with all dims >= 1, got {tuple(self.data.shape)}")
        if self.conditioning.shape != self.data.shape[1:]:
            raise BackendError(
                f"conditioning shape {tuple(self.conditioning.shape)} != latent frame shape {tuple(self.data.shape[1:])}"
            )
        if not self.sigma >= 0:
            raise BackendError(f"noise level must be >= 0, got {self.sigma}")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return tuple(self.data.shape[-2:])

    def with_data(self, data: Tensor, sigma: float | None = None) -> "LatentVideo":
        return LatentVideo(data, self.sigma if sigma is None else sigma, self.conditioning)

    def clone(self) -> "LatentVideo":
        return LatentVideo(self.data.detach().clone(), self.sigma, self.conditioning)


@dataclass
class FeatureMapSet:
    """Per-frame features ``(N, h, w, d)`` at latent resolution from one layer."""

    maps: Tensor
    source: LayerKey
    aligned: bool

    def __post_init__(self):
        if self.maps.dim() != 4 or self.maps.shape[-1] < 1:
            raise BackendError(f"feature maps must be (N, h, w, d) with d >= 1, got {tuple(self.maps.shape)}")

    @property
    def num_frames(self) -> int:
        return self.maps.shape[0]


class DenoiserBackend(abc.ABC):
    name: str = "backend"
    supports_alignment_mode: bool = True
    supports_analytic_gradient: bool = True

    def __init__(self, channels: int, latent_hw: tuple[int, int], num_frames: int | None = None):
        self.channels = channels
        self.latent_hw = tuple(latent_hw)
        self.num_frames = num_frames

    # -- contract -----------------------------------------------------------
    @property
    @abc.abstractmethod
    def layers(self) -> tuple[LayerKey, ...]:
        """Every hookable site this backend exposes."""

    @abc.abstractmethod
    def _predict(self, latent: LatentVideo) -> Tensor: ...

    @abc.abstractmethod
    def _features(self, latent: LatentVideo, layers: Sequence[LayerKey], aligned: bool) -> list[FeatureMapSet]: ...

    # -- public API ---------------------------------------------------------
    def check_latent(self, latent: LatentVideo) -> None:
        _, c, h, w = latent.data.shape
        if c != self.channels or (h, w) != self.latent_hw:
            raise BackendError(
                f"{self.name}: latent (C={c}, {h}x{w}) does not match backend (C={self.channels}, "
                f"{self.latent_hw[0]}x{self.latent_hw[1]})"
            )
        if self.num_frames is not None and latent.num_frames != self.num_frames:
            raise BackendError(f"{self.name}: expected {self.num_frames} frames, got {latent.num_frames}")

    def predict_clean(self, latent: LatentVideo) -> Tensor:
        """Denoised video estimate ``(N, C, h, w)``; the generation pass."""
        self.check_latent(latent)
        with torch.no_grad():
            out = self._predict(latent)
        if not torch.isfinite(out).all():
            raise BackendError(f"{self.name}: non-finite prediction at sigma={latent.sigma}")
        return out

    def run_guidance_pass(
        self, latent: LatentVideo, layers: Sequence[LayerKey], aligned: bool = True
    ) -> list[FeatureMapSet]:
        """Features from ``layers``, differentiable with respect to ``latent.data``."""
        self.check_latent(latent)
        registry = set(self.layers)
        for key in layers:
            if key not in registry:
                raise BackendError(f"{self.name}: unknown layer {key}")
            if aligned and key.kind != "spatial_attn":
                raise BackendError(f"key/value substitution is only defined for spatial attention, not {key}")
        if aligned and not self.supports_alignment_mode:
            raise BackendError(f"{self.name} does not support aligned guidance passes")
        return self._features(latent, list(layers), aligned)


def gradient_of(
    backend: DenoiserBackend,
    loss_fn: Callable[[LatentVideo], Tensor],
    latent: LatentVideo,
) -> Tensor:
    """Gradient of the scalar ``loss_fn(latent)`` with respect to ``latent.data``."""
    if not backend.supports_analytic_gradient:
        raise BackendError(f"{backend.name} cannot provide gradients")
    data = latent.data.detach().clone().requires_grad_(True)
    loss = loss_fn(latent.with_data(data))
    if loss.dim() != 0:
        raise BackendError("loss must be a scalar")
    if not loss.requires_grad:
        return torch.zeros_like(data)
    (grad,) = torch.autograd.grad(loss, data, allow_unused=True)
    return torch.zeros_like(data) if grad is None else grad


def all_layer_keys(stages: Iterable[str] = STAGES, kinds: Iterable[str] = KINDS) -> tuple[LayerKey, ...]:
    return tuple(LayerKey(s, k, i) for s in stages for k in kinds for i in (1, 2, 3))
