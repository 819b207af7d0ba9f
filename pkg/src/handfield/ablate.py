"""Desk-scale ablation grid: canonicalization variants and model components.

Every run trains on the same dataset from the same seed and differs from the
full model in exactly one section of the experiment config.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, desk_config
from .dataset import Dataset
from .hand_model import skin
from .metrics import bench_render, evaluate
from .synth import SceneRecipe, crease_image, sample_poses
from .training import Avatar, train

CREASE_THRESHOLD = 0.95  # pixels darkened by at least 5% form the pose-dependent region


@dataclass(frozen=True)
class Run:
    name: str
    overrides: dict


RUNS = (
    Run("ours", {}),
    Run("xyz", {"field": {"variant": "xyz"}}),
    Run("per_bone", {"field": {"variant": "per_bone"}}),
    Run("uvh_no_pose", {"field": {"pose_conditioning": False}}),
    # same total field evaluations per ray as mesh-guided sampling
    Run("hier", {"render": {"strategy": "hier", "n_coarse": 8, "n_fine": 8}}),
    Run("no_sr_no_perc", {"use_sr": False, "loss": {"perc_mode": "off"}}),
    Run("no_sr_patch", {"use_sr": False, "loss": {"perc_mode": "patch64"}}),
    Run("no_sr_full", {"use_sr": False}),
)

TABLE3 = (("xyz", "xyz"), ("per-bone xyz", "per_bone"), ("uvh w.o. pose cond.", "uvh_no_pose"),
          ("uvh w. pose cond. (ours)", "ours"))
TABLE4 = (("w.o. mesh-guided samp.", "hier"), ("w.o. SR, w.o. perc", "no_sr_no_perc"),
          ("w.o. SR, patch perc", "no_sr_patch"), ("w.o. SR, full perc", "no_sr_full"),
          ("ours (full perc)", "ours"))

# modules whose code changes the numbers in a report
_HASHED = ("ablate.py", "camera.py", "config.py", "dataset.py", "field.py", "hand_model.py", "mesh_geometry.py",
           "metrics.py", "render.py", "sr.py", "synth.py", "training.py", "core")


def source_hash() -> str:
    root = Path(__file__).parent
    h = hashlib.sha256()
    for name in _HASHED:
        p = root / name
        files = sorted(p.rglob("*.py")) if p.is_dir() else [p]
        for f in files:
            h.update(f.relative_to(root).as_posix().encode())
            h.update(f.read_bytes())
    return h.hexdigest()[:16]


def _merge(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    d = cfg.to_dict()
    for key, val in overrides.items():
        if isinstance(val, dict):
            d[key] = {**d[key], **val}
        else:
            d[key] = val
    return ExperimentConfig.from_dict(d)


def grid_configs(base: ExperimentConfig | None = None) -> dict:
    base = desk_config() if base is None else base
    return {r.name: _merge(base, {**r.overrides, "name": r.name}) for r in RUNS}


def crease_regions(ds: Dataset, split: str = "heldout") -> dict:
    """(frame, camera) -> mask of pixels whose appearance depends on joint bending."""
    recipe = SceneRecipe.from_dict(ds.recipe) if ds.recipe else SceneRecipe()
    out = {}
    for p in ds.indices(split):
        params = ds.frames[p].params
        mesh = skin(ds.template, params)
        for j, cam in enumerate(ds.cameras):
            out[(p, j)] = (crease_image(mesh, params, cam, recipe) < CREASE_THRESHOLD) & ds.frames[p].masks[j]
    return out


def calibration_report(av: Avatar, ds: Dataset, ev: dict) -> list:
    """Learned vs generating (gain, bias) for each perturbed camera."""
    recipe = SceneRecipe.from_dict(ds.recipe) if ds.recipe else SceneRecipe()
    g = av.store["calib/gain"].data.astype(np.float64)
    b = av.store["calib/bias"].data.astype(np.float64)
    rows = []
    per_cam = ev["psnr_per_camera"]
    perturbed = {int(c) for c, _, _ in recipe.perturbations}
    others = [v for j, v in per_cam.items() if int(j) not in perturbed]
    for cam, gg, bb in recipe.perturbations:
        cam = int(cam)
        rows.append({
            "camera": cam,
            "true_gain": float(gg), "true_bias": float(bb),
            "gain": g[cam].tolist(), "bias": b[cam].tolist(),
            "gain_rel_err": float(np.max(np.abs(g[cam] - gg)) / abs(gg)),
            "bias_rel_err": float(np.max(np.abs(b[cam] - bb)) / abs(bb)) if bb else float(np.max(np.abs(b[cam]))),
            "psnr_camera": float(per_cam[cam]),
            "psnr_unperturbed": float(np.mean(others)) if others else float("nan"),
        })
    return rows


def _bench(av: Avatar, ds: Dataset, frames: int, threads: int) -> dict:
    poses = [ds.frames[p].params for p in ds.indices("heldout")] or [ds.frames[0].params]
    recipe = SceneRecipe.from_dict(ds.recipe) if ds.recipe else SceneRecipe()
    extra = sample_poses(SceneRecipe(**{**recipe.to_dict(), "seed": recipe.seed + 101}))
    poses = (poses + extra)[:max(frames, 1)]
    rep = bench_render(av, poses, ds.cameras[0], n_frames=frames, threads=threads)
    return rep.to_dict()


def evaluate_run(av: Avatar, ds: Dataset, regions: dict, bench_frames: int = 10, threads: int = 1) -> dict:
    ev = evaluate(av, ds, "heldout", with_features=True, region_fn=lambda p, j: regions[(p, j)])
    out = {
        "psnr": ev["psnr"],
        "psnr_per_camera": {str(k): v for k, v in ev["psnr_per_camera"].items()},
        "feature_distance": ev["feature_distance"],
        "crease_psnr": ev["region_psnr"],
        "params": {"field": av.num_params("field/"), "sr": av.num_params("sr/"), "total": av.num_params("")},
        "calibration": calibration_report(av, ds, ev),
    }
    if bench_frames:
        out["bench"] = _bench(av, ds, bench_frames, threads)
    return out


def _row(label: str, name: str, runs: dict) -> dict:
    r = runs[name]
    row = {"row": label, "run": name, "psnr": r["psnr"], "feature_distance": r["feature_distance"],
           "crease_psnr": r["crease_psnr"], "field_params": r["params"]["field"]}
    if "bench" in r:
        row["fps"] = r["bench"]["fps"]
    return row


def run_ablation(ds: Dataset, work_dir, base: ExperimentConfig | None = None, only=None, bench_frames: int = 10,
                 threads: int = 1, log=None) -> dict:
    """Train (or resume) every run under ``work_dir/<name>`` and collect the report."""
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    cfgs = grid_configs(base)
    names = [r.name for r in RUNS if only is None or r.name in only]
    regions = crease_regions(ds)
    runs = {}
    for name in names:
        run_dir = work / name
        done = run_dir / "metrics.json"
        if done.exists():
            rec = json.loads(done.read_text())
            if rec.get("config") == cfgs[name].to_dict():
                runs[name] = {**rec["metrics"], "source": rec.get("source")}
                if log:
                    log(f"{name}: cached")
                continue
        if log:
            log(f"{name}: training {cfgs[name].train.steps} steps")
        av = train(ds, cfgs[name], run_dir)
        train_s = av.train_seconds
        m = evaluate_run(av, ds, regions, bench_frames, threads)
        m["train_seconds"] = train_s
        m["source"] = source_hash()
        runs[name] = m
        done.write_text(json.dumps({"config": cfgs[name].to_dict(), "source": m["source"], "metrics": m}, indent=1))
        if log:
            log(f"{name}: psnr {m['psnr']:.2f} dB, {train_s:.0f} s")
    src = source_hash()
    report = {"source": src, "base_config": (desk_config() if base is None else base).to_dict(), "runs": runs,
              "stale_runs": sorted(n for n, r in runs.items() if r.get("source") != src)}
    if all(n in runs for _, n in TABLE3):
        report["table3"] = [_row(label, n, runs) for label, n in TABLE3]
    if all(n in runs for _, n in TABLE4):
        report["table4"] = [_row(label, n, runs) for label, n in TABLE4]
    return report
