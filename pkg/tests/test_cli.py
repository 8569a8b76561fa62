import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from trajguide.cli import EXIT_OK, EXIT_RUNTIME, EXIT_SPEC, default_sweep, main
from trajguide.runspec import SpecError, demo_spec_path, resolve

SMALL = {
    "backend": "blob",
    "num_frames": 4,
    "latent_hw": [16, 16],
    "image_hw": [128, 128],
    "seed": 7,
    "trajectories": [{"h": 40, "w": 40, "keyframes": [[0, 56, 56], [3, 80, 72]]}],
    "guidance": {"timesteps": [6, 5], "iterations": 2, "learning_rate": 1.0},
    "sampler": {"steps": 6},
}


def write_spec(tmp_path, spec, name="spec.json"):
    p = tmp_path / name
    p.write_text(json.dumps(spec))
    return p


def digests(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generate_is_deterministic(tmp_path):
    spec = write_spec(tmp_path, SMALL)
    out = tmp_path / "run"
    assert main(["generate", "--spec", str(spec), "--out", str(out)]) == EXIT_OK
    first = digests(out)
    for p in sorted(out.rglob("*"), reverse=True):
        p.unlink() if p.is_file() else p.rmdir()
    assert main(["generate", "--spec", str(spec), "--out", str(out)]) == EXIT_OK
    assert digests(out) == first
    assert {"metadata.json", "loss_report.csv", "frames/frame_000.png", "overlays/overlay_000.png"} <= set(first)


@pytest.mark.parametrize(
    "bad, path",
    [
        ({**SMALL, "colour": "red"}, "$"),
        ({**SMALL, "num_frames": 0}, "$.num_frames"),
        ({**SMALL, "guidance": {"timesteps": [60]}}, "$"),
        ({**SMALL, "trajectories": [{"h": 40, "w": 40}]}, "$.trajectories[0]"),
    ],
)
def test_invalid_spec_exit_2_and_no_outputs(tmp_path, capsys, bad, path):
    out = tmp_path / "never"
    spec = write_spec(tmp_path, bad)
    assert main(["generate", "--spec", str(spec), "--out", str(out)]) == EXIT_SPEC
    assert not out.exists()
    assert path in capsys.readouterr().err


def test_unreadable_spec(tmp_path):
    (tmp_path / "x.json").write_text("{not json")
    assert main(["generate", "--spec", str(tmp_path / "x.json"), "--out", str(tmp_path / "o")]) == EXIT_SPEC
    assert main(["generate", "--spec", str(tmp_path / "missing.json")]) == EXIT_SPEC


def test_runtime_failure_exit_3(tmp_path):
    spec = write_spec(tmp_path, {**SMALL, "backend": "adapter:/nonexistent/weights"})
    assert main(["generate", "--spec", str(spec), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME


def test_no_trajectories_disables_guidance(tmp_path):
    spec = write_spec(tmp_path, {**SMALL, "trajectories": []})
    assert main(["generate", "--spec", str(spec), "--out", str(tmp_path / "o")]) == EXIT_OK
    meta = json.loads((tmp_path / "o" / "metadata.json").read_text())
    assert meta["guidance"] == "disabled" and meta["objmc"] is None and meta["guided_timesteps"] == []


def test_metadata_echo_replays_bit_exact(tmp_path):
    spec = write_spec(tmp_path, SMALL)
    assert main(["generate", "--spec", str(spec), "--out", str(tmp_path / "a")]) == EXIT_OK
    meta = json.loads((tmp_path / "a" / "metadata.json").read_text())
    cfg = meta["config"]
    # every effective hyperparameter is present
    assert cfg["guidance"]["betas"] == [0.9, 0.999] and cfg["filter"] == {"kind": "butterworth", "cutoff": 0.5, "order": 4}
    assert cfg["guidance"]["layers"] == "M2-3" and cfg["guidance"]["sigma_scale"] == 0.2
    assert meta["guided_timesteps"] == [6, 5] and meta["frame_range"]["min"] < meta["frame_range"]["max"]
    replay = write_spec(tmp_path, cfg, "replay.json")
    assert main(["generate", "--spec", str(replay), "--out", str(tmp_path / "b")]) == EXIT_OK
    a, b = digests(tmp_path / "a"), digests(tmp_path / "b")
    a.pop("metadata.json"), b.pop("metadata.json")
    assert a == b


def test_resolved_defaults_mirror_reference_setup():
    spec = resolve({"backend": "toy_unet", "num_frames": 14, "latent_hw": [16, 16], "image_hw": [128, 128]})
    g = spec["guidance"]
    assert spec["sampler"]["steps"] == 50 and g["timesteps"] == list(range(45, 29, -1))
    assert g["iterations"] == 5 and g["learning_rate"] == 0.21 and spec["filter"]["cutoff"] == 0.5
    with pytest.raises(SpecError):
        resolve({"backend": "blob"})


def test_seed_override_changes_output(tmp_path):
    spec = write_spec(tmp_path, SMALL)
    main(["generate", "--spec", str(spec), "--out", str(tmp_path / "a")])
    main(["generate", "--spec", str(spec), "--out", str(tmp_path / "b"), "--seed", "8"])
    assert json.loads((tmp_path / "b" / "metadata.json").read_text())["config"]["seed"] == 8
    assert digests(tmp_path / "a")["frames/frame_000.png"] != digests(tmp_path / "b")["frames/frame_000.png"]


def test_debug_latents_raw_dump(tmp_path):
    spec = write_spec(tmp_path, SMALL)
    assert main(["generate", "--spec", str(spec), "--out", str(tmp_path / "o"), "--debug-latents"]) == EXIT_OK
    bins = sorted((tmp_path / "o" / "latents").glob("*.bin"))
    assert len(bins) == 6
    side = json.loads(bins[0].with_suffix(".json").read_text())
    assert side["shape"] == [4, 4, 16, 16] and side["seed"] == 7 and side["timestep"] == 6
    arr = np.fromfile(bins[0], dtype=np.dtype(side["dtype"]).newbyteorder("<")).reshape(side["shape"])
    assert np.isfinite(arr).all()


def test_loss_report_csv(tmp_path):
    spec = write_spec(tmp_path, SMALL)
    main(["generate", "--spec", str(spec), "--out", str(tmp_path / "o")])
    rows = list(csv.reader((tmp_path / "o" / "loss_report.csv").open()))
    assert rows[0] == ["timestep", "iteration", "loss"]
    assert [(r[0], r[1]) for r in rows[1:]] == [(t, i) for t in ("6", "5") for i in ("0", "1", "2")]


def test_ablate_gamma_rows(tmp_path, capsys):
    spec = write_spec(tmp_path, {**SMALL, "ablation": {"gamma": [0.0, 0.5, 1.0]}})
    assert main(["ablate", "--spec", str(spec), "--out", str(tmp_path / "sw"), "--axis", "gamma"]) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "sw" / "sweep_gamma.csv").open()))
    assert [r["run_id"] for r in rows] == ["unguided", "run_00", "run_01", "run_02"]
    filters = [json.loads(r["config"])["filter"] for r in rows[1:]]
    assert [f["kind"] for f in filters] == ["ideal", "butterworth", "ideal"]
    assert all(r["status"] == "ok" and r["objmc"] for r in rows)


def test_ablate_records_failures_and_continues(tmp_path):
    spec = write_spec(tmp_path, {**SMALL, "ablation": {"layers": ["bogus", "M2"]}})
    assert main(["ablate", "--spec", str(spec), "--out", str(tmp_path / "sw"), "--axis", "layers"]) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "sw" / "sweep_layers.csv").open()))
    assert [r["status"] for r in rows] == ["ok", "failed", "ok"] and rows[1]["error"]


def test_default_sweeps_cover_axes():
    spec = resolve(json.loads(demo_spec_path().read_text()))
    assert default_sweep("feature_source", spec) == ["aligned_spatial", "raw_spatial", "temporal", "upsample", "moft"]
    assert default_sweep("gamma", spec) == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert "M2-3" in default_sweep("layers", spec)
    ts = default_sweep("timesteps", spec)
    assert [20] in ts and any(len(v) > 1 for v in ts)


def test_diagnose_outputs(tmp_path):
    moving = {**SMALL, "trajectories": [{"h": 40, "w": 40, "keyframes": [[0, 40, 40], [3, 88, 88]]}]}
    spec = write_spec(tmp_path, moving)
    assert main(["diagnose", "--spec", str(spec), "--out", str(tmp_path / "d")]) == EXIT_OK
    pngs = list((tmp_path / "d" / "pca").glob("*.png"))
    assert len(pngs) == 4 * 2 * 2
    rows = {(r["mode"], r["layer"]): r for r in csv.DictReader((tmp_path / "d" / "similarity.csv").open())}
    for layer in ("mid.spatial_attn.2", "mid.spatial_attn.3"):
        assert float(rows["aligned", layer]["box_similarity"]) >= float(rows["raw", layer]["box_similarity"])


def test_eval_objmc_points_and_frames(tmp_path, capsys):
    tgt = [[[1, 1], [2, 2], [3, 3]]]
    spec = write_spec(tmp_path, {"target": tgt, "generated": [[[4, 5], [5, 6], [6, 7]]]})
    assert main(["eval-objmc", "--spec", str(spec), "--out", str(tmp_path / "e")]) == EXIT_OK
    assert "ObjMC: 5.000000" in capsys.readouterr().out
    assert (tmp_path / "e" / "objmc.csv").exists()
    base = np.random.default_rng(0).random((40, 40))
    frames = np.stack([np.roll(base, (k, 2 * k), (0, 1)) for k in range(4)])
    np.save(tmp_path / "f.npy", frames)
    spec = write_spec(tmp_path, {"target": [[[10 + 2 * k, 12 + k] for k in range(4)]], "frames": str(tmp_path / "f.npy")})
    assert main(["eval-objmc", "--spec", str(spec)]) == EXIT_OK
    assert "ObjMC: 0.000000" in capsys.readouterr().out
    assert main(["eval-objmc", "--spec", str(write_spec(tmp_path, {"generated": []}))]) == EXIT_SPEC


def test_console_entry_point(tmp_path):
    spec = write_spec(tmp_path, {**SMALL, "trajectories": []})
    proc = subprocess.run(
        [sys.executable, "-m", "trajguide.cli", "generate", "--spec", str(spec), "--out", str(tmp_path / "o")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0 and "guidance: disabled" in proc.stdout
