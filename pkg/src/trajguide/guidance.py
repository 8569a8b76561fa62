"""Feature-matching loss over box crops and the per-timestep latent optimizer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import Tensor

from .backends.base import DenoiserBackend, FeatureMapSet, LatentVideo, LayerKey, parse_layers
from .trajectory import LatentBox, gaussian_weight

log = logging.getLogger(__name__)

WEIGHTINGS = ("gaussian", "identity")
FEATURE_SOURCES = ("aligned_spatial", "raw_spatial", "temporal", "upsample", "moft")


class GuidanceError(ValueError):
    pass


@dataclass
class GuidanceConfig:
    """Hyperparameters of the guided sampler.

    ``timesteps`` use the countdown convention: with ``T`` steps, ``t = T``
    is the first (noisiest) step and ``t = 1`` the last.
    """

    timesteps: tuple[int, ...] = tuple(range(45, 29, -1))
    iterations: int = 5
    learning_rate: float = 0.21
    layers: tuple[LayerKey, ...] = tuple(parse_layers("M2-3"))
    weighting: str = "gaussian"
    feature_source: str = "aligned_spatial"
    sigma_scale: float = 0.2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        self.timesteps = tuple(sorted({int(t) for t in self.timesteps}, reverse=True))
        self.layers = tuple(parse_layers(self.layers) if isinstance(self.layers, str) else self.layers)
        self.layers = tuple(LayerKey.parse(k) if isinstance(k, str) else k for k in self.layers)
        if self.iterations < 1:
            raise GuidanceError(f"iterations must be >= 1, got {self.iterations}")
        if not self.learning_rate > 0:
            raise GuidanceError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.weighting not in WEIGHTINGS:
            raise GuidanceError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.feature_source not in FEATURE_SOURCES:
            raise GuidanceError(f"feature source must be one of {FEATURE_SOURCES}, got {self.feature_source!r}")
        if not self.layers:
            raise GuidanceError("at least one layer is required")
        if any(t < 1 for t in self.timesteps):
            raise GuidanceError(f"timesteps must be >= 1, got {self.timesteps}")

    def check_schedule(self, num_steps: int) -> None:
        bad = [t for t in self.timesteps if t > num_steps]
        if bad:
            raise GuidanceError(f"timesteps {bad} outside the {num_steps}-step schedule")

    def to_dict(self) -> dict:
        return {
            "timesteps": list(self.timesteps),
            "iterations": self.iterations,
            "learning_rate": self.learning_rate,
            "layers": [str(k) for k in self.layers],
            "weighting": self.weighting,
            "feature_source": self.feature_source,
            "sigma_scale": self.sigma_scale,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }


@dataclass
class GuidanceLossReport:
    """Loss trace of one optimization call.

    ``losses[k]`` is the loss evaluated before optimizer step ``k``;
    ``final_loss`` is evaluated after the last step.
    """

    timestep: int | None = None
    losses: list[float] = field(default_factory=list)
    final_loss: float | None = None
    terms: dict[tuple[int, int, str], float] = field(default_factory=dict)
    aborted: str | None = None

    @property
    def initial_loss(self) -> float:
        return self.losses[0]


def crop(maps: Tensor, box: LatentBox) -> Tensor:
    n, h, w, _ = maps.shape
    if not (0 <= box.top and box.top + box.h_lat <= h and 0 <= box.left and box.left + box.w_lat <= w):
        raise GuidanceError(f"box {box} outside feature grid {h}x{w}")
    if not 0 <= box.frame < n:
        raise GuidanceError(f"box frame {box.frame} outside {n} frames")
    return maps[box.frame, box.rows, box.cols]


def eq1_loss(
    features: Sequence[FeatureMapSet],
    boxes: Sequence[Sequence[LatentBox]],
    weighting: str = "gaussian",
    sigma_scale: float = 0.2,
) -> tuple[Tensor, dict[tuple[int, int, str], float]]:
    """Sum over layers, boxes and frames ``n >= 1`` of ``|G * (F_n[box_n] - sg(F_0[box_0]))|``.

    The norm is a single Frobenius norm over each weighted crop. Returns the
    scalar loss and the individual terms keyed by ``(box, frame, layer)``.
    """
    if weighting not in WEIGHTINGS:
        raise GuidanceError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    terms: dict[tuple[int, int, str], float] = {}
    total = None
    for fms in features:
        for b, track in enumerate(boxes):
            first = track[0]
            if any((bx.h_lat, bx.w_lat) != (first.h_lat, first.w_lat) for bx in track):
                raise GuidanceError(f"trajectory {b} has varying crop sizes")
            dtype = fms.maps.dtype
            if weighting == "gaussian":
                g = gaussian_weight(first.h_lat, first.w_lat, sigma_scale, dtype=dtype)[..., None]
            else:
                g = torch.ones(first.h_lat, first.w_lat, 1, dtype=dtype)
            ref = crop(fms.maps, first).detach()
            for bx in track[1:]:
                diff = g * (crop(fms.maps, bx) - ref)
                term = torch.linalg.vector_norm(diff)
                terms[(b, bx.frame, str(fms.source))] = float(term.detach())
                total = term if total is None else total + term
    if total is None:
        dtype = features[0].maps.dtype if features else torch.float64
        total = torch.zeros((), dtype=dtype)
    return total, terms


def moft_features(features: Sequence[FeatureMapSet]) -> list[FeatureMapSet]:
    """Remove the per-location mean over frames from each feature map."""
    out = []
    for fms in features:
        if fms.num_frames < 2:
            raise GuidanceError("mean removal needs at least two frames")
        out.append(FeatureMapSet(fms.maps - fms.maps.mean(dim=0, keepdim=True), fms.source, False))
    return out


def guidance_features(backend: DenoiserBackend, latent: LatentVideo, config: GuidanceConfig) -> list[FeatureMapSet]:
    """Features for the configured source, differentiable in ``latent.data``."""
    src = config.feature_source
    if src == "aligned_spatial":
        return backend.run_guidance_pass(latent, [k.with_kind("spatial_attn") for k in config.layers], True)
    if src == "raw_spatial":
        return backend.run_guidance_pass(latent, [k.with_kind("spatial_attn") for k in config.layers], False)
    if src == "temporal":
        return backend.run_guidance_pass(latent, [k.with_kind("temporal_attn") for k in config.layers], False)
    upsample = backend.run_guidance_pass(latent, [k.with_kind("upsample_block") for k in config.layers], False)
    return moft_features(upsample) if src == "moft" else upsample


def guidance_loss(
    backend: DenoiserBackend, latent: LatentVideo, boxes, config: GuidanceConfig
) -> tuple[Tensor, dict[tuple[int, int, str], float]]:
    return eq1_loss(guidance_features(backend, latent, config), boxes, config.weighting, config.sigma_scale)


def optimize_latent(
    backend: DenoiserBackend,
    latent: LatentVideo,
    boxes: Sequence[Sequence[LatentBox]],
    config: GuidanceConfig,
    timestep: int | None = None,
) -> tuple[LatentVideo, GuidanceLossReport]:
    """Run ``config.iterations`` AdamW steps on a copy of the latent.

    The optimizer is created fresh on every call. On a non-finite loss or
    gradient the original latent is returned and ``report.aborted`` says why.
    """
    report = GuidanceLossReport(timestep=timestep)
    data = latent.data.detach().clone().requires_grad_(True)
    opt = torch.optim.AdamW(
        [data], lr=config.learning_rate, betas=config.betas, eps=config.eps, weight_decay=config.weight_decay
    )
    for it in range(config.iterations + 1):
        loss, terms = guidance_loss(backend, latent.with_data(data), boxes, config)
        value = float(loss.detach())
        if it == 0:
            report.terms = terms
        if it == config.iterations:
            report.final_loss = value
            break
        report.losses.append(value)
        if not torch.isfinite(loss):
            report.aborted = f"non-finite loss at iteration {it} (t={timestep})"
            break
        opt.zero_grad()
        if loss.requires_grad:
            loss.backward()
        if data.grad is None:
            data.grad = torch.zeros_like(data)
        if not torch.isfinite(data.grad).all():
            report.aborted = f"non-finite gradient at iteration {it} (t={timestep})"
            break
        opt.step()
    if report.aborted is not None:
        log.warning("guidance aborted: %s", report.aborted)
        return latent, report
    return latent.with_data(data.detach()), report
