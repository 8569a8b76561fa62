"""Spatial self-attention and its first-frame key/value substitution."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor


@dataclass
class AttentionTensors:
    """Per-frame query/key/value token matrices.

    ``q`` is ``(..., queries, D)``, ``k`` is ``(..., tokens, D)`` and ``v`` is
    ``(..., tokens, d_v)``.
    Leading dimensions are treated as independent heads or batches.
    """

    q: Tensor
    k: Tensor
    v: Tensor

    def __post_init__(self):
        check_shapes(self.q, self.k, self.v)


def check_shapes(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.dim() < 2 or k.dim() < 2 or v.dim() < 2:
        raise ValueError("q, k, v must be at least 2-D (tokens x features)")
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if q.shape[-1] < 1:
        raise ValueError("key/query dimensionality must be >= 1")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key and value token counts differ: {k.shape[-2]} vs {v.shape[-2]}")
    if q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
        raise ValueError(f"leading dims differ: {q.shape[:-2]}, {k.shape[:-2]}, {v.shape[:-2]}")


def _batched(t: Tensor) -> Tensor:
    # one kernel path for every input rank keeps results bitwise comparable
    return t.reshape(-1, *t.shape[-2:])


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic weights ``softmax(q k^T / sqrt(D))``."""
    logits = torch.bmm(_batched(q), _batched(k).transpose(-1, -2)) / math.sqrt(q.shape[-1])
    # torch.softmax subtracts the row max internally
    return torch.softmax(logits, dim=-1).reshape(*q.shape[:-1], k.shape[-2])


def standard_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    check_shapes(q, k, v)
    out = torch.bmm(_batched(attention_weights(q, k)), _batched(v))
    return out.reshape(*q.shape[:-1], v.shape[-1])


def aligned_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Attention in which every frame reads the first frame's keys and values.

    Frames are stacked along dim 0. Keys and values of frame 0 are detached,
    so no gradient reaches them through any frame's output. Frame 0 is
    computed by exactly the same kernel call as :func:`standard_attention`
    would use for it.
    """
    check_shapes(q, k, v)
    if q.shape[0] < 1:
        raise ValueError("aligned attention needs at least one frame")
    k1 = k[:1].detach()
    v1 = v[:1].detach()
    first = standard_attention(q[:1], k1, v1)
    if q.shape[0] == 1:
        return first
    n = q.shape[0] - 1
    rest = standard_attention(
        q[1:],
        k1.expand(n, *k1.shape[1:]).contiguous(),
        v1.expand(n, *v1.shape[1:]).contiguous(),
    )
    return torch.cat([first, rest], dim=0)


def aligned_attention_frames(frames: list[AttentionTensors]) -> list[Tensor]:
    """List form of :func:`aligned_attention`, one entry per frame."""
    if not frames:
        raise ValueError("aligned attention needs at least one frame")
    q = torch.stack([f.q for f in frames])
    k = torch.stack([f.k for f in frames])
    v = torch.stack([f.v for f in frames])
    return list(aligned_attention(q, k, v).unbind(0))


def multihead(fn, q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Split the feature axis into ``heads`` heads, apply ``fn`` per head, merge back."""
    if q.shape[-1] % heads or v.shape[-1] % heads:
        raise ValueError(f"feature dims {q.shape[-1]}, {v.shape[-1]} not divisible by {heads} heads")

    def split(t):
        t = t.reshape(*t.shape[:-1], heads, t.shape[-1] // heads)
        return t.movedim(-2, -3)

    out = fn(split(q), split(k), split(v))
    out = out.movedim(-3, -2)
    return out.reshape(*out.shape[:-2], -1)
