"""Command-line entry point: generate, ablate, diagnose, eval-objmc."""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .backends import SyntheticBlobDenoiser
from .backends.base import LatentVideo
from .baselines import freetraj_noise_init
from .guidance import guidance_features
from .metrics import (
    MetricError,
    TrackedTrajectory,
    blob_center,
    cross_frame_similarity,
    objmc,
    patch_track,
    pca_diagnostic,
)
from .runspec import Run, SpecError, build, load_spec, resolve
from .sampler import euler_step, generate, initial_noise
from .trajectory import TrajectorySet

log = logging.getLogger("trajguide")

EXIT_OK, EXIT_SPEC, EXIT_RUNTIME = 0, 2, 3
AXES = ("feature_source", "layers", "gamma", "lr", "timesteps", "weighting")


# -- artifacts ---------------------------------------------------------------


def _to_uint8(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo if hi > lo else 1.0
    return np.clip(np.rint((x - lo) / span * 255), 0, 255).astype(np.uint8)


def write_frames(video: torch.Tensor, out: Path) -> tuple[float, float]:
    """Channel 0 of every frame as 8-bit grayscale, normalized over the whole run."""
    data = video[:, 0].detach().cpu().numpy().astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    out.mkdir(parents=True, exist_ok=True)
    for n, frame in enumerate(data):
        Image.fromarray(_to_uint8(frame, lo, hi), mode="L").save(out / f"frame_{n:03d}.png")
    return lo, hi


def write_overlays(video: torch.Tensor, boxes: TrajectorySet, tracks, out: Path, scale: int = 8) -> None:
    data = video[:, 0].detach().cpu().numpy().astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    out.mkdir(parents=True, exist_ok=True)
    colors = [(255, 64, 64), (64, 200, 64), (64, 128, 255), (255, 200, 0)]
    for n, frame in enumerate(data):
        img = Image.fromarray(_to_uint8(frame, lo, hi), mode="L").convert("RGB")
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
        draw = ImageDraw.Draw(img)
        for b, track in enumerate(boxes):
            bx = track[n]
            c = colors[b % len(colors)]
            draw.rectangle(
                [bx.left * scale, bx.top * scale, (bx.left + bx.w_lat) * scale - 1, (bx.top + bx.h_lat) * scale - 1],
                outline=c,
            )
            if tracks is not None:
                x, y = tracks[b].points[n]
                px, py = (x + 0.5) * scale, (y + 0.5) * scale
                draw.ellipse([px - 2, py - 2, px + 2, py + 2], fill=c)
        img.save(out / f"overlay_{n:03d}.png")


def write_raw(tensor: torch.Tensor, path: Path, seed: int, **extra) -> None:
    """Little-endian binary dump with a JSON sidecar (dtype, shape, seed)."""
    arr = tensor.detach().cpu().numpy()
    arr = arr.astype(arr.dtype.newbyteorder("<"))
    path.write_bytes(arr.tobytes())
    sidecar = {"dtype": str(arr.dtype.name), "shape": list(arr.shape), "seed": seed, "byteorder": "little", **extra}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- running ---------------------------------------------------------------


def track_video(run: Run, video: torch.Tensor, boxes: TrajectorySet) -> list[TrackedTrajectory]:
    """Per-trajectory tracks in latent pixel-index coordinates."""
    frames = video[:, 0].detach().cpu().numpy()
    tracks = []
    for track in boxes:
        if isinstance(run.backend, SyntheticBlobDenoiser):
            pts = [blob_center(f) for f in frames]
            tracks.append(TrackedTrajectory.from_points(pts))
        else:
            cx, cy = track[0].center()
            start = (int(np.floor(cx)), int(np.floor(cy)))
            radius = max(1, min(track[0].h_lat, track[0].w_lat) // 2)
            tracks.append(patch_track(frames, start, patch_radius=radius, search_radius=4))
    return tracks


def target_tracks(trajectories, image_hw, latent_hw) -> list[TrackedTrajectory]:
    """Requested centers scaled to the latent grid, as pixel indices (index i covers [i, i + 1))."""
    sy, sx = latent_hw[0] / image_hw[0], latent_hw[1] / image_hw[1]
    return [TrackedTrajectory.from_points([(x * sx - 0.5, y * sy - 0.5) for x, y in t.centers]) for t in trajectories]


def execute(run: Run, out: Path | None, debug_latents: bool = False) -> dict:
    """Generate one video; write artifacts to ``out`` when given. Returns a summary."""
    spec = run.spec
    latent_hw = tuple(spec["latent_hw"])
    cond = torch.zeros(run.backend.channels, *latent_hw, dtype=torch.float64)
    noise_init = None
    if spec["noise_init"] == "freetraj":
        noise_init = lambda latent, boxes: freetraj_noise_init(latent, boxes)[0]  # noqa: E731
    result = generate(
        run.backend,
        cond,
        run.trajectories,
        run.guidance,
        spec["seed"],
        run.schedule,
        spec["num_frames"],
        tuple(spec["image_hw"]),
        run.filter,
        noise_init=noise_init,
        keep_latents=debug_latents,
    )
    boxes = TrajectorySet.build(run.trajectories, tuple(spec["image_hw"]), latent_hw)
    guided = bool(len(boxes)) and bool(run.guidance.timesteps)
    summary: dict = {
        "guidance": "enabled" if guided else "disabled",
        "guided_timesteps": [r.timestep for r in result.reports],
        "aborted": [r.aborted for r in result.reports if r.aborted],
        "objmc": None,
    }
    tracks = None
    if len(boxes):
        tracks = track_video(run, result.video, boxes)
        targets = target_tracks(run.trajectories, tuple(spec["image_hw"]), latent_hw)
        summary["objmc"] = objmc(tracks, targets, image_hw=latent_hw)
        summary["tracks"] = [t.points.tolist() for t in tracks]
        summary["targets"] = [t.points.tolist() for t in targets]
    if result.reports:
        summary["mean_initial_loss"] = statistics.fmean(r.initial_loss for r in result.reports)
        finals = [r.final_loss for r in result.reports if r.final_loss is not None]
        summary["mean_final_loss"] = statistics.fmean(finals) if finals else None

    if out is None:
        summary["video"] = result.video
        summary["reports"] = result.reports
        return summary

    out.mkdir(parents=True, exist_ok=True)
    lo, hi = write_frames(result.video, out / "frames")
    if len(boxes):
        write_overlays(result.video, boxes, tracks, out / "overlays")
    rows = []
    for r in result.reports:
        rows += [[r.timestep, k, v] for k, v in enumerate(r.losses)]
        if r.final_loss is not None:
            rows.append([r.timestep, len(r.losses), r.final_loss])
    write_csv(out / "loss_report.csv", ["timestep", "iteration", "loss"], rows)
    if debug_latents:
        (out / "latents").mkdir(exist_ok=True)
        for i, z in enumerate(result.latents):
            write_raw(z, out / "latents" / f"step_{i:03d}.bin", spec["seed"], timestep=run.schedule.timestep(i))
    meta = {
        "config": spec,
        "backend": run.backend.config(),
        "schedule": {"sigmas": list(run.schedule.sigmas), "rho": run.schedule.rho},
        "frame_range": {"min": lo, "max": hi},
        **{k: v for k, v in summary.items() if k not in ("video", "reports")},
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return summary


def _prepare(args) -> Run:
    raw = load_spec(args.spec)
    if getattr(args, "seed", None) is not None:
        raw = {**raw, "seed": args.seed}
    spec = resolve(raw)
    if getattr(args, "out", None):
        spec["outputs"] = str(args.out)
    return build(spec)


def cmd_generate(args) -> int:
    run = _prepare(args)
    out = Path(run.spec["outputs"])
    summary = execute(run, out, args.debug_latents or run.spec["debug"]["latents"])
    print(f"guidance: {summary['guidance']}")
    if summary["objmc"] is not None:
        print(f"ObjMC: {summary['objmc']:.4f} latent px")
    for msg in summary["aborted"]:
        print(f"warning: {msg}", file=sys.stderr)
    print(f"wrote {out}")
    return EXIT_OK


# -- ablation ----------------------------------------------------------------


def default_sweep(axis: str, spec: dict) -> list:
    g = spec["guidance"]
    if axis == "feature_source":
        return ["aligned_spatial", "raw_spatial", "temporal", "upsample", "moft"]
    if axis == "layers":
        return ["B2-3", "M1", "M2-3", "M1-3", "T2-3"]
    if axis == "gamma":
        return [0.0, 0.25, 0.5, 0.75, 1.0]
    if axis == "lr":
        lr = g["learning_rate"]
        return [lr * 0.1, lr * 0.3, lr, lr * 3]
    if axis == "timesteps":
        window = sorted(g["timesteps"], reverse=True)
        if not window:
            return [[spec["sampler"]["steps"]]]
        mid = window[len(window) // 2]
        values = [[window[0]], [mid], [window[-1]], window[: max(1, len(window) // 2)], window]
        unique = []
        for v in values:
            if v not in unique:
                unique.append(v)
        return unique
    if axis == "weighting":
        return ["gaussian", "identity"]
    raise SpecError(f"unknown ablation axis {axis!r}", "--axis")


def gamma_filter(gamma: float, order: int) -> dict:
    # the endpoints have no butterworth form: 0 keeps DC only, 1 passes everything
    if gamma in (0.0, 1.0):
        return {"kind": "ideal", "cutoff": gamma, "order": order}
    return {"kind": "butterworth", "cutoff": gamma, "order": order}


def variant_spec(spec: dict, axis: str, value) -> dict:
    v = copy.deepcopy(spec)
    if axis == "feature_source":
        v["guidance"]["feature_source"] = value
    elif axis == "layers":
        v["guidance"]["layers"] = value
    elif axis == "gamma":
        v["filter"] = gamma_filter(float(value), spec["filter"]["order"])
    elif axis == "lr":
        v["guidance"]["learning_rate"] = float(value)
    elif axis == "timesteps":
        v["guidance"]["timesteps"] = list(value)
    elif axis == "weighting":
        v["guidance"]["weighting"] = value
    return v


def _sweep_one(job) -> list:
    run_id, axis, value, spec, out = job
    try:
        run = build(spec)
        summary = execute(run, Path(out))
        status, err = ("ok" if not summary["aborted"] else "aborted"), "; ".join(summary["aborted"])
    except Exception as e:  # one bad configuration must not stop the sweep
        summary, status, err = {}, "failed", f"{type(e).__name__}: {e}"
    return [
        run_id,
        axis,
        json.dumps(value),
        status,
        summary.get("objmc"),
        len(summary.get("guided_timesteps", [])),
        summary.get("mean_initial_loss"),
        summary.get("mean_final_loss"),
        err,
        json.dumps({k: spec[k] for k in ("guidance", "filter", "sampler", "noise_init", "seed")}, sort_keys=True),
    ]


SWEEP_HEADER = [
    "run_id",
    "axis",
    "value",
    "status",
    "objmc",
    "guided_steps",
    "mean_initial_loss",
    "mean_final_loss",
    "error",
    "config",
]


def run_sweep(spec: dict, axis: str, out: Path, values=None, jobs: int = 1) -> list[list]:
    if axis not in AXES:
        raise SpecError(f"unknown ablation axis {axis!r}, expected one of {AXES}", "--axis")
    if values is None:
        values = spec.get("ablation", {}).get(axis) or default_sweep(axis, spec)
    # reference row: same seed, no guidance
    unguided = copy.deepcopy(spec)
    unguided["guidance"]["timesteps"] = []
    jobs_list = [("unguided", axis, None, unguided, str(out / "unguided"))]
    for i, value in enumerate(values):
        jobs_list.append((f"run_{i:02d}", axis, value, variant_spec(spec, axis, value), str(out / f"run_{i:02d}")))
    out.mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_sweep_one, jobs_list))
    else:
        rows = [_sweep_one(j) for j in jobs_list]
    write_csv(out / f"sweep_{axis}.csv", SWEEP_HEADER, rows)
    return rows


def cmd_ablate(args) -> int:
    run = _prepare(args)
    out = Path(run.spec["outputs"])
    rows = run_sweep(run.spec, args.axis, out, jobs=args.jobs)
    for r in rows:
        objmc_txt = "-" if r[4] is None else f"{r[4]:.4f}"
        print(f"{r[0]:>9}  {args.axis}={r[2]:<24} {r[3]:<8} ObjMC {objmc_txt}")
    print(f"wrote {out / f'sweep_{args.axis}.csv'}")
    return EXIT_OK


# -- diagnostics -------------------------------------------------------------


def diagnose(run: Run, out: Path) -> list[list]:
    """PCA images and cross-frame similarity of aligned vs raw features at one timestep."""
    spec = run.spec
    latent_hw = tuple(spec["latent_hw"])
    window = run.guidance.timesteps or (1,)
    t_diag = min(window)
    cond = torch.zeros(run.backend.channels, *latent_hw, dtype=torch.float64)
    z = initial_noise((spec["num_frames"], run.backend.channels, *latent_hw), run.schedule.sigmas[0], spec["seed"])
    latent = LatentVideo(z, run.schedule.sigmas[0], cond)
    for i in range(run.schedule.step_index(t_diag)):
        latent = euler_step(latent, run.backend.predict_clean(latent), run.schedule.sigmas[i + 1])
    boxes = TrajectorySet.build(run.trajectories, tuple(spec["image_hw"]), latent_hw)

    (out / "pca").mkdir(parents=True, exist_ok=True)
    rows = []
    for mode in ("aligned", "raw"):
        cfg = copy.copy(run.guidance)
        cfg.feature_source = "aligned_spatial" if mode == "aligned" else "raw_spatial"
        with torch.no_grad():
            feats = guidance_features(run.backend, latent, cfg)
        for fms in feats:
            pca = pca_diagnostic(fms)
            proj = pca.projections
            if proj.shape[-1] < 3:
                proj = np.concatenate([proj, np.zeros((*proj.shape[:-1], 3 - proj.shape[-1]))], axis=-1)
            for n, img in enumerate(proj):
                Image.fromarray(_to_uint8(img, 0.0, 1.0), mode="RGB").save(
                    out / "pca" / f"{mode}_{fms.source}_frame{n:03d}.png"
                )
            in_box = cross_frame_similarity(fms, boxes.boxes[0]) if len(boxes) else None
            rows.append(
                [mode, str(fms.source), t_diag, in_box, cross_frame_similarity(fms)]
                + [float(r) for r in pca.explained_variance_ratio]
            )
    write_csv(
        out / "similarity.csv",
        ["mode", "layer", "timestep", "box_similarity", "grid_similarity", "evr1", "evr2", "evr3"],
        rows,
    )
    return rows


def cmd_diagnose(args) -> int:
    run = _prepare(args)
    out = Path(run.spec["outputs"])
    rows = diagnose(run, out)
    for r in rows:
        box = "-" if r[3] is None else f"{r[3]:.4f}"
        print(f"{r[0]:>8} {r[1]:<22} t={r[2]} box {box} grid {r[4]:.4f}")
    return EXIT_OK


# -- evaluation --------------------------------------------------------------


def _tracks(entries, valid=None) -> list[TrackedTrajectory]:
    valid = valid or [None] * len(entries)
    return [TrackedTrajectory.from_points(p, v) for p, v in zip(entries, valid)]


def cmd_eval_objmc(args) -> int:
    raw = load_spec(args.spec)
    if not isinstance(raw, dict) or "target" not in raw:
        raise SpecError("expected an object with a 'target' list of point tracks")
    try:
        target = _tracks(raw["target"], raw.get("target_valid"))
        if "generated" in raw:
            generated = _tracks(raw["generated"], raw.get("generated_valid"))
        elif "frames" in raw:
            frames = np.load(raw["frames"])
            pr, sr = raw.get("patch_radius", 3), raw.get("search_radius", 4)
            generated = [patch_track(frames, tuple(int(round(c)) for c in t.points[0]), pr, sr) for t in target]
        else:
            raise SpecError("need either 'generated' tracks or a 'frames' array")
        image_hw = tuple(raw["image_hw"]) if "image_hw" in raw else None
        resize_to = tuple(raw["resize_to"]) if "resize_to" in raw else None
        value = objmc(generated, target, image_hw=image_hw, min_frames=raw.get("min_frames"), resize_to=resize_to)
    except (MetricError, KeyError, TypeError, ValueError) as err:
        if isinstance(err, SpecError):
            raise
        raise SpecError(str(err)) from err
    print(f"ObjMC: {value:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "objmc.csv", ["spec", "objmc", "trajectories"], [[str(args.spec), value, len(target)]])
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajguide", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--spec", required=True, help="run spec JSON")
        p.add_argument("--out", help="output directory (overrides the spec)")
        if seed:
            p.add_argument("--seed", type=int, help="overrides the spec seed")

    p = sub.add_parser("generate", help="sample one video")
    common(p)
    p.add_argument("--debug-latents", action="store_true", help="dump the latent before every step")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ablate", help="sweep one hyperparameter")
    common(p)
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("diagnose", help="PCA and cross-frame similarity of features")
    common(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("eval-objmc", help="ObjMC between generated and target tracks")
    common(p, seed=False)
    p.set_defaults(func=cmd_eval_objmc)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SpecError as err:
        print(f"spec error: {err}", file=sys.stderr)
        return EXIT_SPEC
    except Exception as err:
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
