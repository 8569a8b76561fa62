"""Run specification loading, validation and default resolution."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema

from .backends import BackendError, DenoiserBackend, make_backend, parse_layers
from .guidance import GuidanceConfig, GuidanceError
from .sampler import SamplerError, Schedule, make_schedule
from .spectral import FilterError, FilterSpec
from .trajectory import BoxTrajectory, TrajectoryError, interpolate_trajectory, to_latent_boxes

# per-backend learning rate when the spec gives none
DEFAULT_LR = {"blob": 1.0, "toy_unet": 0.21, "adapter": 0.21}

DEFAULTS = {
    "channels": 4,
    "seed": 0,
    "trajectories": [],
    "guidance": {
        "timesteps": list(range(45, 29, -1)),
        "iterations": 5,
        "layers": "M2-3",
        "weighting": "gaussian",
        "feature_source": "aligned_spatial",
        "sigma_scale": 0.2,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "weight_decay": 0.0,
    },
    "filter": {"kind": "butterworth", "cutoff": 0.5, "order": 4},
    "sampler": {"steps": 50, "sigma_min": 0.02, "sigma_max": 10.0, "rho": 7.0},
    "noise_init": "none",
    "outputs": "runs/out",
    "debug": {"latents": False},
}


class SpecError(ValueError):
    """Invalid run specification; ``path`` points at the offending field."""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


def schema() -> dict:
    return json.loads(resources.files("trajguide").joinpath("data/runspec.schema.json").read_text())


def demo_spec_path() -> Path:
    return Path(str(resources.files("trajguide").joinpath("data/blob_demo.json")))


def load_spec(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as err:
        raise SpecError(f"invalid JSON ({err.msg} at line {err.lineno})") from err
    except OSError as err:
        raise SpecError(f"cannot read spec: {err}") from err


def _json_path(error: jsonschema.ValidationError) -> str:
    out = "$"
    for p in error.absolute_path:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def resolve(raw: dict) -> dict:
    """Schema-check ``raw`` and fill in every default; the result is self-contained."""
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        raise SpecError(errors[0].message, _json_path(errors[0]))
    spec = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if isinstance(value, dict) and isinstance(spec.get(key), dict):
            spec[key].update(copy.deepcopy(value))
        else:
            spec[key] = copy.deepcopy(value)
    kind = spec["backend"].split(":", 1)[0]
    spec["guidance"].setdefault("learning_rate", DEFAULT_LR[kind])
    if not isinstance(spec["guidance"]["layers"], str):
        spec["guidance"]["layers"] = list(spec["guidance"]["layers"])
    # keyframes are densified so the echoed spec replays without them
    spec["trajectories"] = [
        {"h": t["h"], "w": t["w"], "centers": [list(c) for c in _trajectory(t, spec["num_frames"]).centers]}
        for t in spec["trajectories"]
    ]
    build(spec)
    return spec


def _trajectory(t: dict, num_frames: int) -> BoxTrajectory:
    if "keyframes" in t:
        return interpolate_trajectory(t["h"], t["w"], [tuple(k) for k in t["keyframes"]], num_frames)
    return BoxTrajectory(t["h"], t["w"], tuple(tuple(c) for c in t["centers"]))


@dataclass
class Run:
    spec: dict
    backend: DenoiserBackend
    trajectories: list[BoxTrajectory]
    guidance: GuidanceConfig
    filter: FilterSpec
    schedule: Schedule


def build(spec: dict) -> Run:
    """Turn a resolved spec into live objects; semantic errors raise :class:`SpecError`."""
    where = "$"
    try:
        where = "$.sampler"
        s = spec["sampler"]
        schedule = make_schedule(s["steps"], s["sigma_min"], s["sigma_max"], s["rho"])
        where = "$.guidance"
        g = dict(spec["guidance"])
        g["layers"] = parse_layers(g["layers"])
        g["betas"] = tuple(g["betas"])
        guidance = GuidanceConfig(**g)
        guidance.check_schedule(schedule.num_steps)
        where = "$.filter"
        filt = FilterSpec(**spec["filter"])
        trajectories = []
        for i, t in enumerate(spec["trajectories"]):
            where = f"$.trajectories[{i}]"
            traj = _trajectory(t, spec["num_frames"])
            if traj.num_frames != spec["num_frames"]:
                raise TrajectoryError(f"{traj.num_frames} centers for {spec['num_frames']} frames")
            to_latent_boxes(traj, tuple(spec["image_hw"]), tuple(spec["latent_hw"]))
            trajectories.append(traj)
        where = "$.backend"
        backend = make_backend(spec["backend"], tuple(spec["latent_hw"]), spec["channels"], spec["seed"])
        for key in guidance.layers:
            if key not in backend.layers:
                raise BackendError(f"backend {backend.name} has no layer {key}")
    except (GuidanceError, FilterError, TrajectoryError, SamplerError, BackendError, ValueError) as err:
        raise SpecError(str(err), where) from err
    return Run(spec, backend, trajectories, guidance, filt, schedule)
