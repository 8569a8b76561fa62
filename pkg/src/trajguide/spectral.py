"""Frequency-domain blending of an optimized latent with the original one.

Low frequencies come from the optimized latent and high frequencies from
the original, per frame and channel:

    z_mix = IFFT2(FFT2(z_opt) * H + FFT2(z_orig) * (1 - H))

``H`` is a radial low-pass response. Radii are normalized so the Nyquist
corner of the grid sits at ``r = 1``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import Tensor

from .backends.base import LatentVideo

FILTER_KINDS = ("butterworth", "ideal")


class FilterError(ValueError):
    pass


@dataclass(frozen=True)
class FilterSpec:
    kind: str = "butterworth"
    cutoff: float = 0.5
    order: int = 4

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise FilterError(f"filter kind must be one of {FILTER_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.cutoff <= 1.0:
            raise FilterError(f"cutoff must lie in [0, 1], got {self.cutoff}")
        if self.order < 1:
            raise FilterError(f"order must be >= 1, got {self.order}")
        if self.kind == "butterworth" and self.cutoff == 0:
            raise FilterError("butterworth response is undefined at cutoff 0; use the ideal filter")

    def to_dict(self) -> dict:
        return asdict(self)


def radial_frequency(h: int, w: int, centered: bool = True) -> Tensor:
    """Normalized radius of every FFT bin; 0 at DC, 1 at the Nyquist corner."""
    if h < 1 or w < 1:
        raise FilterError(f"grid must be at least 1x1, got {h}x{w}")
    fy = torch.fft.fftfreq(h, dtype=torch.float64) / 0.5
    fx = torch.fft.fftfreq(w, dtype=torch.float64) / 0.5
    if centered:
        fy, fx = torch.fft.fftshift(fy), torch.fft.fftshift(fx)
    return torch.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2) / math.sqrt(2)


def response_at(spec: FilterSpec, r: Tensor | float) -> Tensor:
    r = torch.as_tensor(r, dtype=torch.float64)
    if spec.kind == "ideal":
        return (r <= spec.cutoff).to(torch.float64)
    return 1.0 / (1.0 + (r / spec.cutoff) ** (2 * spec.order))


def filter_response(spec: FilterSpec, h: int, w: int, centered: bool = True) -> Tensor:
    """Low-pass response on an ``h x w`` frequency grid (DC at the center when ``centered``)."""
    return response_at(spec, radial_frequency(h, w, centered))


def mix_latents(z_opt: LatentVideo, z_orig: LatentVideo, spec: FilterSpec) -> LatentVideo:
    """Take low frequencies from ``z_opt`` and high frequencies from ``z_orig``."""
    a, b = z_opt.data, z_orig.data
    if a.shape != b.shape:
        raise FilterError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if z_opt.sigma != z_orig.sigma:
        raise FilterError(f"noise level mismatch: {z_opt.sigma} vs {z_orig.sigma}")
    if a.is_complex() or b.is_complex():
        raise FilterError("latents must be real")
    hmask = filter_response(spec, *a.shape[-2:], centered=False)
    fa = torch.fft.fft2(a.detach().to(torch.float64))
    fb = torch.fft.fft2(b.detach().to(torch.float64))
    mixed = torch.fft.ifft2(fa * hmask + fb * (1 - hmask))
    scale = max(1.0, float(mixed.real.abs().max()))
    residue = float(mixed.imag.abs().max()) / scale
    assert residue < 1e-6, f"spectral mix left an imaginary residue of {residue:.3g}"
    return LatentVideo(mixed.real.to(a.dtype), z_orig.sigma, z_orig.conditioning)
