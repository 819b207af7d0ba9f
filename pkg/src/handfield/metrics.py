"""Image quality metrics, held-out evaluation and the rendering benchmark."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import tensor as T
from .dataset import Dataset

PSNR_IDENTICAL = float("inf")
_FD_EXTRACTOR = {}


def psnr(G, I) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical images give +inf."""
    G = np.asarray(G, dtype=np.float64)
    I = np.asarray(I, dtype=np.float64)
    if G.shape != I.shape:
        raise ValueError(f"psnr: shape mismatch {G.shape} vs {I.shape}")
    mse = float(np.mean((G - I) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * np.log10(1.0 / mse)


def masked_psnr(G, I, mask) -> float:
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return float("nan")
    return psnr(np.asarray(G)[m], np.asarray(I)[m])


def _fd_extractor():
    from .training import FeatureExtractor

    if "x" not in _FD_EXTRACTOR:
        _FD_EXTRACTOR["x"] = FeatureExtractor((8, 16, 32, 32, 32), seed=1234, dtype=np.float64)
    return _FD_EXTRACTOR["x"]


def feature_distance(G, I) -> float:
    """Mean over stages of the squared distance between channel-normalized pyramid features."""
    ex = _fd_extractor()
    fg = ex.features(np.asarray(G, dtype=np.float64))
    fi = ex.features(np.asarray(I, dtype=np.float64))
    total = 0.0
    for a, b in zip(fg, fi):
        a, b = a.data, b.data
        a = a / (np.sqrt((a * a).sum(axis=-1, keepdims=True)) + 1e-10)
        b = b / (np.sqrt((b * b).sum(axis=-1, keepdims=True)) + 1e-10)
        total += float(((a - b) ** 2).sum(axis=-1).mean())
    return total / len(fg)


def evaluate(av, ds: Dataset, split: str = "heldout", cams=None, strategy=None, use_sr=None,
             with_features: bool = False, region_fn=None) -> dict:
    """Per-image PSNR of calibrated predictions; means per camera and overall.

    ``region_fn(frame_index, cam_index) -> mask`` adds a masked PSNR restricted to that region.
    """
    cams = range(len(ds.cameras)) if cams is None else cams
    per_cam: dict = {j: [] for j in cams}
    fd, region = [], []
    for p in ds.indices(split):
        fr = ds.frames[p]
        for j in cams:
            pred = av.predict(fr.params, ds.cameras[j], j, strategy, key=("eval", p), use_sr=use_sr)
            per_cam[j].append(psnr(fr.images[j], pred))
            if with_features:
                fd.append(feature_distance(fr.images[j], pred))
            if region_fn is not None:
                m = region_fn(p, j)
                if m.any():
                    region.append(float(np.mean((fr.images[j][m] - pred[m]) ** 2)))
    allv = [v for vs in per_cam.values() for v in vs]
    out = {"psnr": float(np.mean(allv)), "psnr_per_camera": {int(j): float(np.mean(v)) for j, v in per_cam.items()}}
    if with_features:
        out["feature_distance"] = float(np.mean(fd))
    if region_fn is not None:
        out["region_psnr"] = float(10 * np.log10(1.0 / np.mean(region))) if region else float("nan")
    return out


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchmarkReport:
    variant: str
    width: int
    height: int
    frames: int
    seconds: float
    fps: float
    threads: int
    samples: dict = field(default_factory=dict)
    runs_fps: list = field(default_factory=list)
    unstable: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def bench_render(av, poses, camera, n_frames: int = 10, warmup: int = 5, runs: int = 3, strategy=None,
                 use_sr=None, threads: int = 1, variant: str | None = None) -> BenchmarkReport:
    """Median-of-``runs`` FPS rendering ``n_frames`` distinct poses at ``camera`` resolution."""
    rc = av._render_cfg(strategy)
    use_sr = av.cfg.use_sr if use_sr is None else use_sr
    infer = av.store.astype(np.float32)
    saved, saved_threads = av.store, av.threads
    av.store = infer
    av.threads = threads
    av.field.store = infer
    if av.sr is not None:
        av.sr.store = infer
    try:
        for k in range(warmup):
            av.predict(poses[k % len(poses)], camera, None, rc.strategy, use_sr=use_sr)
        fps = []
        secs = []
        for _ in range(runs):
            t0 = time.perf_counter()
            for k in range(n_frames):
                av.predict(poses[k % len(poses)], camera, None, rc.strategy, use_sr=use_sr)
            dt = time.perf_counter() - t0
            secs.append(dt)
            fps.append(n_frames / dt)
    finally:
        av.store = saved
        av.threads = saved_threads
        av.field.store = saved
        if av.sr is not None:
            av.sr.store = saved
    order = np.argsort(fps)
    mid = int(order[len(order) // 2])
    unstable = (max(fps) - min(fps)) / max(fps) > 0.15
    samples = {"n_samples": rc.n_samples} if rc.strategy != "hier" else {"n_coarse": rc.n_coarse, "n_fine": rc.n_fine}
    samples["strategy"] = rc.strategy
    samples["per_ray"] = rc.n_coarse + rc.n_fine if rc.strategy == "hier" else rc.n_samples
    label = variant or f"{av.cfg.field.variant}/{rc.strategy}/{'sr' if use_sr else 'direct'}"
    return BenchmarkReport(label, camera.width, camera.height, n_frames, secs[mid], fps[mid], threads, samples,
                           [float(f) for f in fps], bool(unstable))
