"""Small randomly initialized video U-Net with every hook kind.

Three resolution levels (full, half, quarter). The up path has one stage per
level, each with three blocks of ``resblock -> spatial attention -> temporal
attention``. Stages are named by resolution: ``bottom`` is the quarter-size
stage, ``mid`` the half-size one, ``top`` full size.

Spatial attention is single-head over all ``h*w`` tokens of one frame;
temporal attention attends across frames at a fixed pixel. Feature hooks
capture the attention output before the output projection. The
``upsample_block`` hook is the output of the whole block.

Weights and biases are seeded unit-normal draws scaled by
``1/sqrt(fan_in)`` and never trained. The network is stateless: captures are returned, not stored.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..attention import aligned_attention, standard_attention
from .base import DenoiserBackend, FeatureMapSet, LatentVideo, LayerKey, all_layer_keys

def _frozen(gen: torch.Generator, *shape: int, fan_in: int, dtype) -> nn.Parameter:
    w = torch.randn(*shape, generator=gen, dtype=torch.float64) / math.sqrt(fan_in)
    return nn.Parameter(w.to(dtype), requires_grad=False)


class Conv(nn.Module):
    def __init__(self, gen, c_in: int, c_out: int, k: int, dtype):
        super().__init__()
        self.weight = _frozen(gen, c_out, c_in, k, k, fan_in=c_in * k * k, dtype=dtype)
        self.bias = _frozen(gen, c_out, fan_in=c_in * k * k, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, padding=self.weight.shape[-1] // 2)


def _norm(x: Tensor) -> Tensor:
    # channel-wise normalization per pixel, no affine params
    return F.layer_norm(x.movedim(1, -1), (x.shape[1],)).movedim(-1, 1)


class ResBlock(nn.Module):
    def __init__(self, gen, channels: int, dtype):
        super().__init__()
        self.conv1 = Conv(gen, channels, channels, 3, dtype)
        self.conv2 = Conv(gen, channels, channels, 3, dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(F.silu(_norm(x)))
        h = self.conv2(F.silu(h))
        return x + 0.5 * h


class Attention(nn.Module):
    """Single-head attention with separate q/k/v/out projections."""

    def __init__(self, gen, channels: int, dtype):
        super().__init__()
        self.wq = _frozen(gen, channels, channels, fan_in=channels, dtype=dtype)
        self.wk = _frozen(gen, channels, channels, fan_in=channels, dtype=dtype)
        self.wv = _frozen(gen, channels, channels, fan_in=channels, dtype=dtype)
        self.wo = _frozen(gen, channels, channels, fan_in=channels, dtype=dtype)

    def qkv(self, tokens: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        t = F.layer_norm(tokens, (tokens.shape[-1],))
        return t @ self.wq, t @ self.wk, t @ self.wv


class Block(nn.Module):
    def __init__(self, gen, channels: int, dtype):
        super().__init__()
        self.res = ResBlock(gen, channels, dtype)
        self.spatial = Attention(gen, channels, dtype)
        self.temporal = Attention(gen, channels, dtype)

    def forward(
        self, x: Tensor, aligned: bool, probe: dict | None = None, frozen: tuple[Tensor, Tensor] | None = None
    ) -> tuple[Tensor, dict[str, Tensor]]:
        n, c, h, w = x.shape
        feats = {}
        x = self.res(x)

        tokens = x.flatten(2).transpose(1, 2)  # (N, hw, c)
        q, k, v = self.spatial.qkv(tokens)
        if probe is not None:
            probe.update(q=q, k=k, v=v)
        if frozen is not None:
            # first-frame keys/values pinned to given constants
            k = torch.cat([frozen[0], k[1:]])
            v = torch.cat([frozen[1], v[1:]])
        attn = aligned_attention(q, k, v) if aligned else standard_attention(q, k, v)
        feats["spatial_attn"] = attn
        tokens = tokens + attn @ self.spatial.wo

        frames = tokens.transpose(0, 1)  # (hw, N, c)
        q, k, v = self.temporal.qkv(frames)
        attn = standard_attention(q, k, v)
        feats["temporal_attn"] = attn.transpose(0, 1)
        frames = frames + attn @ self.temporal.wo

        tokens = frames.transpose(0, 1)
        feats["upsample_block"] = tokens
        return tokens.transpose(1, 2).reshape(n, c, h, w), feats


class ToyUNet(nn.Module):
    def __init__(self, channels: int = 4, widths: tuple[int, int, int] = (8, 16, 16), seed: int = 0, dtype=torch.float64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        w0, w1, w2 = widths
        # latent + conditioning + noise-level channel
        self.stem = Conv(gen, 2 * channels + 1, w0, 3, dtype)
        self.enc0 = ResBlock(gen, w0, dtype)
        self.down1 = Conv(gen, w0, w1, 3, dtype)
        self.enc1 = ResBlock(gen, w1, dtype)
        self.down2 = Conv(gen, w1, w2, 3, dtype)
        self.enc2 = ResBlock(gen, w2, dtype)
        self.stages = nn.ModuleDict(
            {
                "bottom": nn.ModuleList([Block(gen, w2, dtype) for _ in range(3)]),
                "mid": nn.ModuleList([Block(gen, w1, dtype) for _ in range(3)]),
                "top": nn.ModuleList([Block(gen, w0, dtype) for _ in range(3)]),
            }
        )
        self.merge1 = Conv(gen, w2 + w1, w1, 3, dtype)
        self.merge0 = Conv(gen, w1 + w0, w0, 3, dtype)
        self.head = Conv(gen, w0, channels, 3, dtype)

    def forward(
        self,
        x: Tensor,
        cond: Tensor,
        c_noise: float,
        capture: Sequence[LayerKey] = (),
        aligned: Sequence[LayerKey] = (),
        probe: dict | None = None,
        frozen: dict[LayerKey, tuple[Tensor, Tensor]] | None = None,
    ) -> tuple[Tensor, dict[LayerKey, Tensor]]:
        n, _, h, w = x.shape
        wanted = set(capture)
        swap = set(aligned)
        inp = torch.cat([x, cond.expand(n, -1, -1, -1), torch.full_like(x[:, :1], c_noise)], dim=1)
        s0 = self.enc0(self.stem(inp))
        s1 = self.enc1(self.down1(F.avg_pool2d(s0, 2)))
        s2 = self.enc2(self.down2(F.avg_pool2d(s1, 2)))

        captured = {}
        y = s2
        for stage, skip, merge in (("bottom", None, None), ("mid", s1, self.merge1), ("top", s0, self.merge0)):
            if skip is not None:
                y = F.interpolate(y, size=skip.shape[-2:], mode="nearest")
                y = merge(torch.cat([y, skip], dim=1))
            for i, block in enumerate(self.stages[stage], start=1):
                key = LayerKey(stage, "spatial_attn", i)
                y, feats = block(
                    y,
                    key in swap,
                    probe if probe is not None and key in swap else None,
                    (frozen or {}).get(key) if key in swap else None,
                )
                for kind, tokens in feats.items():
                    k = key.with_kind(kind)
                    if k in wanted:
                        captured[k] = _to_latent_res(tokens, y.shape[-2:], (h, w))
        return self.head(y), captured


def _to_latent_res(tokens: Tensor, hw_feat, hw_lat) -> Tensor:
    n, _, d = tokens.shape
    grid = tokens.transpose(1, 2).reshape(n, d, *hw_feat)
    if tuple(hw_feat) != tuple(hw_lat):
        grid = F.interpolate(grid, size=hw_lat, mode="bilinear", align_corners=False)
    return grid.permute(0, 2, 3, 1)


class ToyUNetDenoiser(DenoiserBackend):
    """Denoised-sample wrapper around :class:`ToyUNet` with unit-variance preconditioning."""

    name = "toy_unet"
    supports_alignment_mode = True
    supports_analytic_gradient = True

    def __init__(self, latent_hw: tuple[int, int] = (16, 16), channels: int = 4, seed: int = 0, dtype=torch.float64):
        super().__init__(channels, latent_hw)
        if latent_hw[0] % 4 or latent_hw[1] % 4:
            raise ValueError(f"latent size must be divisible by 4, got {latent_hw}")
        self.seed = seed
        self.dtype = dtype
        self.net = ToyUNet(channels, seed=seed, dtype=dtype).eval()

    @property
    def layers(self) -> tuple[LayerKey, ...]:
        return all_layer_keys()

    def config(self) -> dict:
        return {"name": self.name, "latent_hw": list(self.latent_hw), "channels": self.channels, "seed": self.seed}

    def _run(self, latent: LatentVideo, capture=(), aligned=(), probe=None, frozen=None):
        s = latent.sigma
        c_in = 1 / math.sqrt(s**2 + 1)
        c_noise = math.log(s) / 4 if s > 0 else -10.0
        z = latent.data.to(self.dtype)
        cond = latent.conditioning.to(self.dtype)[None]
        out, captured = self.net(c_in * z, cond, c_noise, capture, aligned, probe, frozen)
        return z, out, captured

    def _predict(self, latent: LatentVideo) -> Tensor:
        s = latent.sigma
        z, out, _ = self._run(latent)
        c_skip = 1 / (s**2 + 1)
        c_out = s / math.sqrt(s**2 + 1)
        return (c_skip * z + c_out * out).to(latent.data.dtype)

    def _features(
        self, latent: LatentVideo, layers: Sequence[LayerKey], aligned: bool, probe=None, frozen=None
    ) -> list[FeatureMapSet]:
        swap = [k for k in layers if k.kind == "spatial_attn"] if aligned else []
        _, _, captured = self._run(latent, layers, swap, probe, frozen)
        return [FeatureMapSet(captured[k], k, aligned) for k in layers]

    def features_with_probe(
        self, latent: LatentVideo, key: LayerKey, frozen_kv: tuple[Tensor, Tensor] | None = None
    ) -> tuple[FeatureMapSet, dict]:
        """Aligned features of one spatial layer plus the raw ``q, k, v`` that fed it.

        ``frozen_kv`` replaces the first frame's keys and values at that layer
        with fixed tensors, which turns the stop-gradient into a plain
        constant (useful for finite-difference checks).
        """
        self.check_latent(latent)
        probe: dict = {}
        frozen = {key: frozen_kv} if frozen_kv is not None else None
        (fms,) = self._features(latent, [key], True, probe, frozen)
        return fms, probe
