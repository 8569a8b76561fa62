"""Zero-shot baselines adapted to the same loss and optimizer.

* ``freetraj_init``: copy frame-0 noise along the trajectory before sampling.
* ``dragdiffusion_feats``: match upsample-block outputs instead of aligned attention.
* ``moft_feats``: upsample-block outputs with the mean over frames removed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .backends.base import DenoiserBackend, FeatureMapSet, LatentVideo, LayerKey
from .guidance import moft_features
from .trajectory import LatentBox, TrajectorySet

BASELINE_KINDS = ("freetraj_init", "dragdiffusion_feats", "moft_feats")

# feature source each baseline uses inside the shared loss
FEATURE_SOURCE = {"dragdiffusion_feats": "upsample", "moft_feats": "moft"}


@dataclass
class NoiseInitDiagnostics:
    overlaps: list[tuple[int, int, int]] = field(default_factory=list)  # (frame, earlier traj, later traj)


def _overlap(a: LatentBox, b: LatentBox) -> bool:
    return a.top < b.top + b.h_lat and b.top < a.top + a.h_lat and a.left < b.left + b.w_lat and b.left < a.left + a.w_lat


def freetraj_noise_init(
    noise: LatentVideo, boxes: TrajectorySet | Sequence[Sequence[LatentBox]]
) -> tuple[LatentVideo, NoiseInitDiagnostics]:
    """Paste each trajectory's frame-0 noise crop into its box in every later frame.

    Trajectories are applied in order, so a later one overwrites an earlier
    one where their boxes overlap; overlaps are listed in the diagnostics.
    """
    tracks = list(boxes.boxes if isinstance(boxes, TrajectorySet) else boxes)
    src = noise.data
    out = src.clone()
    diag = NoiseInitDiagnostics()
    for b, track in enumerate(tracks):
        first = track[0]
        patch = src[first.frame, :, first.rows, first.cols]
        for bx in track[1:]:
            out[bx.frame, :, bx.rows, bx.cols] = patch
            for a in range(b):
                if _overlap(tracks[a][bx.frame], bx):
                    diag.overlaps.append((bx.frame, a, b))
    return noise.with_data(out), diag


def dragdiffusion_features(
    backend: DenoiserBackend, latent: LatentVideo, layers: Sequence[LayerKey]
) -> list[FeatureMapSet]:
    return backend.run_guidance_pass(latent, [k.with_kind("upsample_block") for k in layers], aligned=False)


__all__ = [
    "BASELINE_KINDS",
    "FEATURE_SOURCE",
    "NoiseInitDiagnostics",
    "dragdiffusion_features",
    "freetraj_noise_init",
    "moft_features",
]
