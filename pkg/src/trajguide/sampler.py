"""Karras noise schedule, Euler steps and the guided generation loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
from torch import Tensor

from .backends.base import DenoiserBackend, LatentVideo
from .guidance import GuidanceConfig, GuidanceLossReport, optimize_latent
from .spectral import FilterSpec, mix_latents
from .trajectory import BoxTrajectory, TrajectorySet

log = logging.getLogger(__name__)


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Noise levels ``sigmas[0] > ... > sigmas[T-1] > sigmas[T] = 0``."""

    sigmas: tuple[float, ...]
    rho: float

    @property
    def num_steps(self) -> int:
        return len(self.sigmas) - 1

    def timestep(self, i: int) -> int:
        """Countdown label of zero-based step ``i`` (the first step is ``t = T``)."""
        return self.num_steps - i

    def step_index(self, t: int) -> int:
        return self.num_steps - t


def make_schedule(T: int, sigma_min: float = 0.02, sigma_max: float = 10.0, rho: float = 7.0) -> Schedule:
    if T < 1:
        raise SamplerError(f"need at least one step, got T={T}")
    if not 0 < sigma_min < sigma_max:
        raise SamplerError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if not rho > 0:
        raise SamplerError(f"rho must be positive, got {rho}")
    if T == 1:
        return Schedule((float(sigma_max), 0.0), rho)
    lo, hi = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
    sigmas = [(hi + i / (T - 1) * (lo - hi)) ** rho for i in range(T)]
    return Schedule(tuple(float(s) for s in sigmas) + (0.0,), rho)


def euler_step(latent: LatentVideo, denoised: Tensor, sigma_next: float) -> LatentVideo:
    sigma = latent.sigma
    if sigma <= 0:
        raise SamplerError("Euler step needs sigma > 0")
    z = latent.data
    return latent.with_data(z + (sigma_next - sigma) * (z - denoised) / sigma, sigma_next)


def initial_noise(shape: Sequence[int], sigma_max: float, seed: int, dtype=torch.float64) -> Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen, dtype=dtype) * sigma_max


@dataclass
class GenerationResult:
    video: Tensor
    schedule: Schedule
    reports: list[GuidanceLossReport] = field(default_factory=list)
    latents: list[Tensor] = field(default_factory=list)


def euler_sample(backend: DenoiserBackend, z: Tensor, conditioning: Tensor, schedule: Schedule) -> Tensor:
    """Plain deterministic Euler sampling from ``z`` at ``sigmas[0]``."""
    latent = LatentVideo(z, schedule.sigmas[0], conditioning)
    for i in range(schedule.num_steps):
        latent = euler_step(latent, backend.predict_clean(latent), schedule.sigmas[i + 1])
    return latent.data


def generate(
    backend: DenoiserBackend,
    conditioning: Tensor,
    trajectories: Sequence[BoxTrajectory],
    config: GuidanceConfig,
    seed: int,
    schedule: Schedule,
    num_frames: int,
    image_hw: tuple[int, int],
    filter_spec: FilterSpec = FilterSpec(),
    noise_init: Callable[[LatentVideo, TrajectorySet], LatentVideo] | None = None,
    keep_latents: bool = False,
) -> GenerationResult:
    """Guided sampling.

    At each configured timestep the latent is optimized against the box
    loss, then blended with its pre-optimization self in frequency space,
    before the ordinary denoise-and-step.
    """
    config.check_schedule(schedule.num_steps)
    h, w = backend.latent_hw
    boxes = TrajectorySet.build(trajectories, image_hw, (h, w))
    for traj in trajectories:
        if traj.num_frames != num_frames:
            raise SamplerError(f"trajectory has {traj.num_frames} frames, video has {num_frames}")

    z = initial_noise((num_frames, backend.channels, h, w), schedule.sigmas[0], seed, conditioning.dtype)
    latent = LatentVideo(z, schedule.sigmas[0], conditioning)
    if noise_init is not None and len(boxes):
        latent = noise_init(latent, boxes)

    result = GenerationResult(video=latent.data, schedule=schedule)
    guided = set(config.timesteps) if len(boxes) else set()
    for i in range(schedule.num_steps):
        t = schedule.timestep(i)
        if t in guided:
            z_opt, report = optimize_latent(backend, latent, boxes.boxes, config, timestep=t)
            result.reports.append(report)
            latent = mix_latents(z_opt, latent, filter_spec)
        if keep_latents:
            result.latents.append(latent.data.clone())
        latent = euler_step(latent, backend.predict_clean(latent), schedule.sigmas[i + 1])
        if not torch.isfinite(latent.data).all():
            raise SamplerError(f"non-finite latent after step t={t} (sigma={schedule.sigmas[i]:.4g})")
    result.video = latent.data
    return result
