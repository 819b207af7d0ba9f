import numpy as np
import pytest

from handfield.config import desk_config
from handfield.metrics import bench_render, evaluate, feature_distance, masked_psnr, psnr
from handfield.training import Avatar


def test_psnr_examples():
    G = np.zeros((4, 4, 3))
    assert psnr(G, np.full_like(G, 0.1)) == pytest.approx(20.0)
    assert psnr(G, np.full_like(G, 0.01)) == pytest.approx(40.0)
    assert psnr(G, G) == float("inf")
    with pytest.raises(ValueError, match="shape"):
        psnr(G, np.zeros((4, 3, 3)))


def test_masked_psnr():
    G = np.zeros((2, 2, 3))
    I = np.zeros((2, 2, 3))
    I[0, 0] = 0.1
    I[1, 1] = 0.5
    m = np.array([[True, True], [False, False]])
    assert masked_psnr(G, I, m) == pytest.approx(10 * np.log10(1 / (0.01 / 2)))
    assert np.isnan(masked_psnr(G, I, np.zeros((2, 2), dtype=bool)))


def test_feature_distance_properties(rng):
    G = rng.random((32, 48, 3))
    small = np.clip(G + rng.normal(scale=0.03, size=G.shape), 0, 1)
    large = np.clip(G + rng.normal(scale=0.3, size=G.shape), 0, 1)
    assert feature_distance(G, G) == 0.0
    assert feature_distance(G, small) == pytest.approx(feature_distance(small, G), rel=1e-12)
    assert 0 < feature_distance(G, small) < feature_distance(G, large)


def test_evaluate_and_bench(tiny_dataset):
    cfg = desk_config().with_(field={"width": 8, "depth": 2, "inject_after": 1, "pos_freqs": 2, "dir_freqs": 1,
                                     "feature_channels": 1}, sr={"in_channels": 4, "hidden": 4})
    av = Avatar(cfg, tiny_dataset.template, len(tiny_dataset.cameras))
    ev = evaluate(av, tiny_dataset, "heldout", with_features=True,
                  region_fn=lambda p, j: tiny_dataset.frames[p].masks[j])
    fr = tiny_dataset.frames[2]
    want = np.mean([psnr(fr.images[j], av.predict(fr.params, tiny_dataset.cameras[j], j)) for j in (0, 1)])
    assert ev["psnr"] == pytest.approx(want)
    assert set(ev["psnr_per_camera"]) == {0, 1} and ev["feature_distance"] > 0 and np.isfinite(ev["region_psnr"])
    store = av.store
    rep = bench_render(av, [fr.params], tiny_dataset.cameras[0], n_frames=2, warmup=1, runs=3, threads=2)
    assert av.store is store and av.threads is None  # inference copy and threads are restored
    assert rep.fps > 0 and rep.frames == 2 and len(rep.runs_fps) == 3 and rep.threads == 2
    assert rep.samples["strategy"] == "mesh" and rep.samples["per_ray"] == av.cfg.render.n_samples
