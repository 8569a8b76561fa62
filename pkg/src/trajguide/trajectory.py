"""Bounding-box trajectories and their realization on the latent grid.

Points are ``(x, y)`` in image pixels with ``x`` to the right and ``y`` down.
Coordinates are continuous: pixel ``i`` spans ``[i, i + 1)``, so a box of
height ``h`` centered at ``cy`` covers ``[cy - h/2, cy + h/2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch

Point = tuple[float, float]


class TrajectoryError(ValueError):
    """Raised for malformed trajectory specifications."""


def round_half_up(value: float) -> int:
    return math.floor(value + 0.5)


@dataclass(frozen=True)
class BoxTrajectory:
    """A fixed-size box whose center moves from frame to frame."""

    height: int
    width: int
    centers: tuple[Point, ...]

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise TrajectoryError(f"box size must be >= 1, got {self.height}x{self.width}")
        if len(self.centers) < 1:
            raise TrajectoryError("trajectory needs at least one center")
        object.__setattr__(self, "centers", tuple((float(x), float(y)) for x, y in self.centers))

    @property
    def num_frames(self) -> int:
        return len(self.centers)

    @classmethod
    def from_keyframes(
        cls,
        height: int,
        width: int,
        keyframes: Mapping[int, Point] | Sequence[tuple[int, float, float]],
        num_frames: int,
    ) -> "BoxTrajectory":
        return interpolate_trajectory(height, width, keyframes, num_frames)

    def is_static(self) -> bool:
        return all(c == self.centers[0] for c in self.centers)


@dataclass(frozen=True)
class LatentBox:
    frame: int
    top: int
    left: int
    h_lat: int
    w_lat: int

    @property
    def rows(self) -> slice:
        return slice(self.top, self.top + self.h_lat)

    @property
    def cols(self) -> slice:
        return slice(self.left, self.left + self.w_lat)

    def center(self) -> Point:
        """Continuous ``(x, y)`` center on the latent grid."""
        return (self.left + self.w_lat / 2, self.top + self.h_lat / 2)


def _keyframe_items(keyframes) -> list[tuple[int, Point]]:
    if isinstance(keyframes, Mapping):
        return [(int(f), (float(p[0]), float(p[1]))) for f, p in keyframes.items()]
    items = []
    for entry in keyframes:
        f, x, y = entry
        items.append((int(f), (float(x), float(y))))
    return items


def interpolate_trajectory(
    height: int,
    width: int,
    keyframes: Mapping[int, Point] | Sequence[tuple[int, float, float]],
    num_frames: int,
) -> BoxTrajectory:
    """Densify sparse keyframes (zero-based frame indices) by piecewise-linear interpolation.

    Frames before the first or after the last keyframe hold the nearest
    keyframe's center. Keyframe centers are reproduced exactly.
    """
    if num_frames < 1:
        raise TrajectoryError("num_frames must be >= 1")
    items = _keyframe_items(keyframes)
    if not items:
        raise TrajectoryError("at least one keyframe is required")
    frames = [f for f, _ in items]
    if len(set(frames)) != len(frames):
        raise TrajectoryError(f"duplicate keyframe indices in {sorted(frames)}")
    for f in frames:
        if not 0 <= f < num_frames:
            raise TrajectoryError(f"keyframe {f} outside [0, {num_frames - 1}]")
    items.sort(key=lambda it: it[0])

    centers: list[Point] = []
    k = 0
    for n in range(num_frames):
        while k + 1 < len(items) and items[k + 1][0] <= n:
            k += 1
        f0, p0 = items[k]
        if n <= f0 or k + 1 == len(items):
            centers.append(p0)
            continue
        f1, p1 = items[k + 1]
        a = (n - f0) / (f1 - f0)
        centers.append((p0[0] + a * (p1[0] - p0[0]), p0[1] + a * (p1[1] - p0[1])))
    return BoxTrajectory(height, width, tuple(centers))


def to_latent_boxes(
    traj: BoxTrajectory,
    image_hw: tuple[int, int],
    latent_hw: tuple[int, int],
) -> list[LatentBox]:
    """Scale a trajectory onto the latent grid, one box per frame.

    The box size is rounded once so every frame shares the same crop shape;
    boxes that spill over the border are shifted back inside, never shrunk.
    """
    H, W = image_hw
    h, w = latent_hw
    if min(H, W, h, w) < 1:
        raise TrajectoryError(f"grid sizes must be >= 1, got image {image_hw}, latent {latent_hw}")
    sy, sx = h / H, w / W
    h_lat = max(1, round_half_up(traj.height * sy))
    w_lat = max(1, round_half_up(traj.width * sx))
    if h_lat > h or w_lat > w:
        raise TrajectoryError(f"latent box {h_lat}x{w_lat} does not fit in latent grid {h}x{w}")

    boxes = []
    for n, (cx, cy) in enumerate(traj.centers):
        top = round_half_up(cy * sy - h_lat / 2)
        left = round_half_up(cx * sx - w_lat / 2)
        top = min(max(top, 0), h - h_lat)
        left = min(max(left, 0), w - w_lat)
        boxes.append(LatentBox(n, top, left, h_lat, w_lat))
    return boxes


def gaussian_weight(h_lat: int, w_lat: int, scale: float = 0.2, dtype=torch.float64) -> torch.Tensor:
    """Peak-normalized Gaussian heatmap over an ``h_lat x w_lat`` crop.

    Standard deviation is ``scale`` times the crop size along each axis.
    """
    if h_lat < 1 or w_lat < 1:
        raise TrajectoryError(f"weight grid must be >= 1x1, got {h_lat}x{w_lat}")
    i = torch.arange(h_lat, dtype=dtype)
    j = torch.arange(w_lat, dtype=dtype)
    sy, sx = scale * h_lat, scale * w_lat
    gy = torch.exp(-((i - (h_lat - 1) / 2) ** 2) / (2 * sy**2))
    gx = torch.exp(-((j - (w_lat - 1) / 2) ** 2) / (2 * sx**2))
    # even sizes have no grid point at the center
    gy, gx = gy / gy.max(), gx / gx.max()
    return gy[:, None] * gx[None, :]


@dataclass
class TrajectorySet:
    """Trajectories realized on one latent grid, ready for the loss."""

    boxes: list[list[LatentBox]] = field(default_factory=list)

    @classmethod
    def build(cls, trajectories: Sequence[BoxTrajectory], image_hw, latent_hw) -> "TrajectorySet":
        return cls([to_latent_boxes(t, image_hw, latent_hw) for t in trajectories])

    def __len__(self):
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)
