"""Motion-fidelity metric, a brute-force patch tracker, and feature diagnostics.

Tracked points are ``(x, y)`` in pixel-index coordinates of the video.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backends.base import FeatureMapSet
from .trajectory import LatentBox


class MetricError(ValueError):
    pass


@dataclass
class TrackedTrajectory:
    points: np.ndarray  # (N, 2) as (x, y)
    valid: np.ndarray  # (N,) bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.valid is None:
            self.valid = np.ones(len(self.points), dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != (len(self.points),):
            raise MetricError(f"validity mask shape {self.valid.shape} != ({len(self.points)},)")

    @classmethod
    def from_points(cls, points, valid=None) -> "TrackedTrajectory":
        return cls(np.asarray(points, dtype=np.float64), valid)

    def __len__(self):
        return len(self.points)


def objmc(
    generated: Sequence[TrackedTrajectory],
    target: Sequence[TrackedTrajectory],
    image_hw: tuple[int, int] | None = None,
    min_frames: int | None = None,
    resize_to: tuple[int, int] | None = None,
) -> float:
    """Mean Euclidean distance over all valid ``(trajectory, frame)`` pairs.

    Target points outside ``image_hw`` (when given) are excluded, as are
    whole trajectories shorter than ``min_frames``. ``resize_to`` rescales
    both point sets from ``image_hw`` to a common resolution first.
    """
    if len(generated) != len(target):
        raise MetricError(f"{len(generated)} generated vs {len(target)} target trajectories")
    if resize_to is not None and image_hw is None:
        raise MetricError("resizing needs the source image size")
    dists = []
    for gen, tgt in zip(generated, target):
        if len(gen) != len(tgt):
            raise MetricError(f"trajectory lengths differ: {len(gen)} vs {len(tgt)}")
        if min_frames is not None and len(tgt) < min_frames:
            continue
        mask = gen.valid & tgt.valid
        if image_hw is not None:
            H, W = image_hw
            x, y = tgt.points[:, 0], tgt.points[:, 1]
            mask &= (x >= 0) & (x < W) & (y >= 0) & (y < H)
        g, t = gen.points, tgt.points
        if resize_to is not None:
            scale = np.array([resize_to[1] / image_hw[1], resize_to[0] / image_hw[0]])
            g, t = g * scale, t * scale
        dists.append(np.linalg.norm(g - t, axis=1)[mask])
    dists = np.concatenate(dists) if dists else np.zeros(0)
    if dists.size == 0:
        raise MetricError("no valid trajectory points to compare")
    return float(dists.mean())


def patch_track(
    frames: np.ndarray, start: tuple[int, int], patch_radius: int = 3, search_radius: int = 4
) -> TrackedTrajectory:
    """Track a frame-0 template by exhaustive SSD search around the previous position.

    ``frames`` is ``(N, H, W)`` or ``(N, H, W, C)``. Each frame is matched
    against the frame-0 template (no template update). Ties go to the
    smallest displacement, then row-major order. Where the template or the
    candidate window is clipped by the border, only the overlapping pixels
    are compared (mean squared difference) and the frame is marked invalid.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        frames = frames[..., None]
    if frames.ndim != 4:
        raise MetricError(f"frames must be (N, H, W[, C]), got shape {frames.shape}")
    if patch_radius < 1 or search_radius < 1:
        raise MetricError("patch and search radii must be >= 1")
    n, H, W, _ = frames.shape
    x0, y0 = int(start[0]), int(start[1])
    if not (0 <= x0 < W and 0 <= y0 < H):
        raise MetricError(f"start point {start} outside {W}x{H} frame")

    r = patch_radius
    offs = np.arange(-r, r + 1)
    ty, tx = np.meshgrid(y0 + offs, x0 + offs, indexing="ij")
    t_in = (ty >= 0) & (ty < H) & (tx >= 0) & (tx < W)
    template = frames[0][np.clip(ty, 0, H - 1), np.clip(tx, 0, W - 1)]
    clipped0 = not t_in.all()

    candidates = [
        (dy, dx) for dy in range(-search_radius, search_radius + 1) for dx in range(-search_radius, search_radius + 1)
    ]
    # preferred order on ties: small displacement, then row-major
    candidates.sort(key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))

    points = [(float(x0), float(y0))]
    valid = [not clipped0]
    px, py = x0, y0
    for k in range(1, n):
        best = None
        for dy, dx in candidates:
            cy, cx = py + dy, px + dx
            if not (0 <= cy < H and 0 <= cx < W):
                continue
            sy, sx = ty - y0 + cy, tx - x0 + cx
            ok = t_in & (sy >= 0) & (sy < H) & (sx >= 0) & (sx < W)
            if not ok.any():
                continue
            diff = frames[k][sy[ok], sx[ok]] - template[ok]
            score = float((diff**2).mean())
            if best is None or score < best[0]:
                best = (score, cy, cx, not ok.all())
        if best is None:
            points.append((float(px), float(py)))
            valid.append(False)
            continue
        _, py, px, clipped = best
        points.append((float(px), float(py)))
        valid.append(not clipped)
    return TrackedTrajectory(np.array(points), np.array(valid))


@dataclass
class PCAResult:
    projections: np.ndarray  # (N, h, w, k), each component min-max scaled to [0, 1]
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance_ratio: np.ndarray  # (k,)
    rank: int


def pca_diagnostic(features: FeatureMapSet, n_components: int = 3, tol: float = 1e-10) -> PCAResult:
    """Joint PCA over every frame's feature vectors, projected to at most 3 components."""
    maps = features.maps.detach().cpu().numpy().astype(np.float64)
    n, h, w, d = maps.shape
    if d < n_components:
        raise MetricError(f"need at least {n_components} feature channels, got {d}")
    x = maps.reshape(-1, d)
    x = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    var = s**2
    total = var.sum()
    rank = int((s > tol * max(1.0, s[0] if s.size else 0.0)).sum())
    k = min(n_components, rank)
    comps = vt[:k]
    ratio = var[:k] / total if total > 0 else np.zeros(k)
    proj = x @ comps.T
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    proj = ((proj - lo) / span).reshape(n, h, w, k)
    return PCAResult(proj, comps, ratio, rank)


def cross_frame_similarity(features: FeatureMapSet, boxes: Sequence[LatentBox] | None = None) -> float:
    """Mean cosine similarity between frame-0 and later-frame feature vectors.

    With ``boxes`` the comparison follows the box (crop of frame ``n``
    against the crop of frame 0); otherwise it is pixelwise over the grid.
    """
    maps = features.maps.detach().cpu().numpy().astype(np.float64)
    if maps.shape[0] < 2:
        raise MetricError("need at least two frames")
    if boxes is None:
        ref = maps[0]
        cur = maps[1:]
    else:
        b0 = boxes[0]
        ref = maps[0, b0.rows, b0.cols]
        cur = np.stack([maps[b.frame, b.rows, b.cols] for b in boxes[1:]])
    num = (cur * ref[None]).sum(-1)
    den = np.linalg.norm(cur, axis=-1) * np.linalg.norm(ref, axis=-1)[None]
    cos = num / np.maximum(den, 1e-12)
    return float(cos.mean())


def blob_center(frame: np.ndarray) -> tuple[float, float]:
    """Sub-pixel ``(x, y)`` index position of a single bright Gaussian-like blob.

    Fits a parabola to the log intensity around the brightest pixel, which
    is exact for a sampled Gaussian away from the border.
    """
    f = np.asarray(frame, dtype=np.float64)
    iy, ix = np.unravel_index(int(np.argmax(f)), f.shape)
    logf = np.log(np.maximum(f, 1e-300))

    def offset(a, b, c):
        den = a - 2 * b + c
        return 0.0 if den >= 0 else 0.5 * (a - c) / den

    oy = offset(logf[iy - 1, ix], logf[iy, ix], logf[iy + 1, ix]) if 0 < iy < f.shape[0] - 1 else 0.0
    ox = offset(logf[iy, ix - 1], logf[iy, ix], logf[iy, ix + 1]) if 0 < ix < f.shape[1] - 1 else 0.0
    return ix + ox, iy + oy
