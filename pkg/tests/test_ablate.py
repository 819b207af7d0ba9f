import json

import numpy as np
import pytest

from handfield import ablate
from handfield.ablate import RUNS, TABLE3, TABLE4, crease_regions, grid_configs, run_ablation
from handfield.config import desk_config
from handfield.synth import SceneRecipe

TINY = desk_config(steps=2).with_(
    field={"width": 8, "depth": 2, "inject_after": 1, "pos_freqs": 2, "dir_freqs": 1, "feature_channels": 1},
    sr={"in_channels": 4, "hidden": 4}, train={"eval_every": 0},
)


def test_each_run_changes_one_thing():
    base = desk_config()
    cfgs = grid_configs(base)
    assert set(cfgs) == {r.name for r in RUNS}
    ref = cfgs["ours"].to_dict()
    for name, cfg in cfgs.items():
        d = cfg.to_dict()
        changed = {k for k in d if d[k] != ref[k]} - {"name"}
        want = {k for k in next(r.overrides for r in RUNS if r.name == name)}
        assert changed == want, name
    assert cfgs["uvh_no_pose"].field.pose_conditioning is False
    assert cfgs["no_sr_patch"].loss.perc_mode == "patch64" and not cfgs["no_sr_patch"].use_sr
    assert {n for _, n in TABLE3} | {n for _, n in TABLE4} == set(cfgs)


def test_crease_regions_follow_bent_joints(tiny_dataset):
    regions = crease_regions(tiny_dataset)
    assert set(regions) == {(2, 0), (2, 1)}
    for (p, j), m in regions.items():
        assert m.dtype == bool and not np.any(m & ~tiny_dataset.frames[p].masks[j])
    assert any(m.any() for m in regions.values())


def test_run_ablation_subset_and_cache(tiny_dataset, tmp_path):
    logs = []
    only = ["ours", "xyz"]
    rep = run_ablation(tiny_dataset, tmp_path, TINY, only=only, bench_frames=1, log=logs.append)
    assert set(rep["runs"]) == set(only) and "table3" not in rep and rep["stale_runs"] == []
    r = rep["runs"]["ours"]
    assert {"psnr", "feature_distance", "crease_psnr", "params", "calibration", "bench"} <= set(r)
    assert r["params"]["total"] == r["params"]["field"] + r["params"]["sr"] + 2 * 2 * 3
    cal = r["calibration"][0]
    assert cal["camera"] == 1 and cal["true_gain"] == 1.3
    assert json.loads((tmp_path / "xyz" / "metrics.json").read_text())["config"]["field"]["variant"] == "xyz"
    logs.clear()
    again = run_ablation(tiny_dataset, tmp_path, TINY, only=only, bench_frames=1, log=logs.append)
    assert logs == ["ours: cached", "xyz: cached"]
    assert again["runs"]["ours"]["psnr"] == r["psnr"]


def test_stale_runs_are_flagged(tiny_dataset, tmp_path, monkeypatch):
    run_ablation(tiny_dataset, tmp_path, TINY, only=["ours"], bench_frames=0)
    monkeypatch.setattr(ablate, "source_hash", lambda: "changed")
    rep = run_ablation(tiny_dataset, tmp_path, TINY, only=["ours"], bench_frames=0)
    assert rep["stale_runs"] == ["ours"]


def test_tables_from_complete_grid(monkeypatch, tiny_dataset, tmp_path):
    # fill the cache with synthetic metrics so table assembly can be checked without training
    cfgs = grid_configs(TINY)
    for k, name in enumerate(cfgs):
        m = {"psnr": 20.0 + k, "feature_distance": 0.1 * k, "crease_psnr": 18.0 + k,
             "params": {"field": 100 + k, "sr": 5, "total": 110 + k}, "bench": {"fps": 1.0 + k},
             }
        (tmp_path / name).mkdir()
        (tmp_path / name / "metrics.json").write_text(json.dumps({"config": cfgs[name].to_dict(), "source": ablate.source_hash(), "metrics": m}))
    rep = run_ablation(tiny_dataset, tmp_path, TINY)
    assert [row["row"] for row in rep["table3"]] == [label for label, _ in TABLE3]
    assert [row["run"] for row in rep["table4"]] == [name for _, name in TABLE4]
    assert rep["table3"][-1]["psnr"] == 20.0 and rep["table3"][-1]["fps"] == 1.0


def test_patch_loss_needs_large_images(tiny_dataset, tmp_path):
    with pytest.raises(ValueError, match="at least 64x64"):
        run_ablation(tiny_dataset, tmp_path, TINY, only=["no_sr_patch"], bench_frames=0)
    assert SceneRecipe().width >= 64 and SceneRecipe().height >= 64
