"""Ray generation, sampling strategies and volumetric integration of feature images."""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import mesh_geometry as mg
from .camera import Camera, ConfigError
from .core import tensor as T
from .field import FrameContext, RadianceField

STRATEGIES = ("mesh", "hier", "strat")
HFIM_MAGIC = b"HFIM"
DEPTH_EPS = 1e-6


def default_threads() -> int:
    """Thread count from ``HANDFIELD_THREADS`` (1 when unset)."""
    raw = os.environ.get("HANDFIELD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"HANDFIELD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"HANDFIELD_THREADS must be a positive integer, got {raw!r}")
    return n


@dataclass
class RenderConfig:
    strategy: str = "mesh"
    n_samples: int = 16  # mesh-guided and plain stratified
    n_coarse: int = 16  # hierarchical first pass
    n_fine: int = 16  # hierarchical second pass
    margin: float = 0.01  # half-width of the shell around the coarse surface, m
    dilation: int = 3  # px; silhouette neighbors that still get samples
    background: tuple = (1.0, 1.0, 1.0)
    chunk: int = 4096  # rays per field batch; fixed so results do not depend on threads

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown sampling strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if min(self.n_samples, self.n_coarse, self.n_fine) < 1:
            raise ConfigError("sample counts must be >= 1")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        self.background = tuple(float(c) for c in self.background)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RenderConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown render config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class RaySamples:
    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3) unit
    t: np.ndarray  # (R, S) strictly increasing
    deltas: np.ndarray  # (R, S)

    def points(self) -> np.ndarray:
        return self.origins[:, None, :] + self.t[..., None] * self.dirs[:, None, :]


@dataclass
class FeatureImage:
    L: np.ndarray  # (H, W, 3)
    F: np.ndarray  # (H, W, C)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W)

    @property
    def width(self) -> int:
        return int(self.L.shape[1])

    @property
    def height(self) -> int:
        return int(self.L.shape[0])

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.L, self.F, self.alpha[..., None], self.depth[..., None]], axis=-1)


# ---------------------------------------------------------------------------
# rays and samples


def generate_rays(camera: Camera):
    """World-space origins and unit directions through every pixel center, row-major."""
    jj, ii = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    x = (jj.reshape(-1) + 0.5 - camera.cx) / camera.fx
    y = (ii.reshape(-1) + 0.5 - camera.cy) / camera.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    dirs = d_cam @ camera.R  # R^T applied to row vectors
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    return origins, dirs


def _deltas(t: np.ndarray) -> np.ndarray:
    d = np.diff(t, axis=1)
    if d.shape[1] == 0:
        return np.zeros_like(t)
    last = d.mean(axis=1, keepdims=True)
    return np.concatenate([d, last], axis=1)


def stratified_depths(t_near, t_far, S: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """One depth per equal sub-interval; midpoints when ``rng`` is None."""
    t_near = np.asarray(t_near, dtype=np.float64).reshape(-1, 1)
    t_far = np.asarray(t_far, dtype=np.float64).reshape(-1, 1)
    u = 0.5 if rng is None else rng.random((t_near.shape[0], S))
    k = np.arange(S)[None, :]
    return t_near + (t_far - t_near) * (k + u) / S


def stratified_samples(origins, dirs, t_near, t_far, S: int, rng=None) -> RaySamples:
    t = stratified_depths(t_near, t_far, S, rng)
    if S == 1:
        deltas = (np.asarray(t_far) - np.asarray(t_near)).reshape(-1, 1)
    else:
        deltas = _deltas(t)
    return RaySamples(np.asarray(origins), np.asarray(dirs), t, deltas)


def mesh_guided_samples(origins, dirs, bounds, S: int, rng=None) -> RaySamples | None:
    """Stratified samples inside mesh-derived bounds; None for a ray without bounds."""
    if bounds is None:
        return None
    t_near, t_far = bounds
    return stratified_samples(origins, dirs, t_near, t_far, S, rng)


def sample_pdf(t_near, t_far, weights: np.ndarray, n: int, rng=None) -> np.ndarray:
    """Inverse-transform samples from the piecewise-constant PDF over equal coarse bins.

    Rows whose weights are all zero fall back to stratified samples.
    """
    t_near = np.asarray(t_near, dtype=np.float64).reshape(-1, 1)
    t_far = np.asarray(t_far, dtype=np.float64).reshape(-1, 1)
    R, S = weights.shape
    w = np.maximum(weights.astype(np.float64), 0.0)
    tot = w.sum(axis=1, keepdims=True)
    empty = tot[:, 0] <= 0
    w = np.where(empty[:, None], 1.0, w)
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(w, axis=1)], axis=1)
    cdf /= cdf[:, -1:]
    if rng is None:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (R, n))
    else:
        u = (np.arange(n)[None, :] + rng.random((R, n))) / n
    out = np.empty((R, n))
    for r in range(R):
        c = cdf[r]
        b = np.searchsorted(c, u[r], side="right") - 1
        b = np.clip(b, 0, S - 1)
        # skip zero-mass bins that share a cdf value with the next one
        lo, hi = c[b], c[b + 1]
        frac = np.where(hi > lo, (u[r] - lo) / np.where(hi > lo, hi - lo, 1.0), 0.5)
        out[r] = (b + frac) / S
    return t_near + (t_far - t_near) * out


def merge_sorted(t_a: np.ndarray, t_b: np.ndarray):
    """Merged depths sorted per row plus the permutation into ``concat([t_a, t_b])``."""
    t = np.concatenate([t_a, t_b], axis=1)
    order = np.argsort(t, axis=1, kind="stable")
    return np.take_along_axis(t, order, axis=1), order


# ---------------------------------------------------------------------------
# quadrature


def integrate(sigma, values, t: np.ndarray, deltas: np.ndarray):
    """Composite per-sample outputs; returns (values (R, C) tensor, alpha (R,), depth (R,)).

    ``values`` is the channel stack (color, features); the depth output is not differentiable.
    """
    out = T.composite(sigma, values, deltas)
    C = values.shape[-1]
    w = _weights(np.asarray(T.as_tensor(sigma).data, dtype=np.float64), deltas)
    alpha = out.data[:, C]
    depth = (w * t).sum(axis=1) / np.maximum(w.sum(axis=1), DEPTH_EPS)
    return out, alpha, depth


def _weights(sigma: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    tau = sigma * deltas
    t_after = np.exp(-np.cumsum(tau, axis=1))
    t_before = np.concatenate([np.ones_like(t_after[:, :1]), t_after[:, :-1]], axis=1)
    return t_before - t_after


# ---------------------------------------------------------------------------
# image rendering


@dataclass
class RenderResult:
    """Differentiable render of one image before background compositing."""

    out: T.Tensor  # (H*W, 3 + C + 1): color, features, alpha
    depth: np.ndarray  # (H*W,)
    width: int
    height: int
    n_points: int


def _eval_stack(fieldnet: RadianceField, samples: RaySamples, ctx: FrameContext, skin_weights, dtype):
    R, S = samples.t.shape
    pts = samples.points().reshape(-1, 3).astype(dtype)
    dirs = np.repeat(samples.dirs, S, axis=0).astype(dtype)
    sigma, rgb, feat = fieldnet.evaluate(pts, dirs, ctx, skin_weights)
    vals = T.concat([rgb, feat], axis=-1)
    return T.reshape(sigma, (R, S)), T.reshape(vals, (R, S, vals.shape[-1]))


def _render_chunk(fieldnet, ctx, origins, dirs, t_near, t_far, rcfg: RenderConfig, rng, skin_weights, dtype):
    if rcfg.strategy in ("mesh", "strat"):
        smp = stratified_samples(origins, dirs, t_near, t_far, rcfg.n_samples, rng)
        sigma, vals = _eval_stack(fieldnet, smp, ctx, skin_weights, dtype)
        out, _, depth = integrate(sigma, vals, smp.t, smp.deltas.astype(dtype))
        return out, depth, smp.t.size
    coarse = stratified_samples(origins, dirs, t_near, t_far, rcfg.n_coarse, rng)
    sig_c, val_c = _eval_stack(fieldnet, coarse, ctx, skin_weights, dtype)
    w = _weights(sig_c.data.astype(np.float64), coarse.deltas)
    t_f = sample_pdf(t_near, t_far, w, rcfg.n_fine, rng)
    fine = RaySamples(origins, dirs, t_f, np.zeros_like(t_f))
    sig_f, val_f = _eval_stack(fieldnet, fine, ctx, skin_weights, dtype)
    t_all, order = merge_sorted(coarse.t, t_f)
    rows = np.arange(t_all.shape[0])[:, None]
    sigma = T.getitem(T.concat([sig_c, sig_f], axis=1), (rows, order))
    vals = T.getitem(T.concat([val_c, val_f], axis=1), (rows, order))
    out, _, depth = integrate(sigma, vals, t_all, _deltas(t_all).astype(dtype))
    return out, depth, t_all.size


def render(fieldnet: RadianceField, ctx: FrameContext, camera: Camera, rcfg: RenderConfig,
           rng: np.random.Generator | None = None, skin_weights=None, dtype=None,
           threads: int | None = None) -> RenderResult:
    """Render ``camera``'s pixels; rays without mesh bounds (mesh strategy) stay empty.

    With ``threads > 1`` and frozen, noise-free inference the ray chunks run on a thread pool.
    Chunking and BLAS threading do not depend on ``threads``, so the image is bit-identical
    for every thread count.
    """
    dtype = fieldnet.store.dtype if dtype is None else np.dtype(dtype)
    origins, dirs = generate_rays(camera)
    n = origins.shape[0]
    if rcfg.strategy == "mesh":
        dm = mg.rasterize_depth(ctx.mesh, camera)
        t_near, t_far, valid = mg.ray_bounds_image(dm, rcfg.margin, rcfg.dilation)
        idx = np.flatnonzero(valid.reshape(-1))
        t_near, t_far = t_near.reshape(-1)[idx], t_far.reshape(-1)[idx]
    else:
        idx = np.arange(n)
        t_near = np.full(n, camera.near)
        t_far = np.full(n, camera.far)
    C = 3 + fieldnet.cfg.feature_channels + 1

    def chunk(s):
        sl = slice(s, s + rcfg.chunk)
        ri = idx[sl]
        return _render_chunk(fieldnet, ctx, origins[ri], dirs[ri], t_near[sl], t_far[sl], rcfg, rng,
                             skin_weights, dtype)

    starts = range(0, idx.size, rcfg.chunk)
    if threads is not None and threads > 1 and rng is None and T.active_tape() is None:
        with threadpool_limits(1), ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(chunk, starts))
    elif threads is not None:
        with threadpool_limits(1):
            results = [chunk(s) for s in starts]
    else:
        results = [chunk(s) for s in starts]
    outs = [r[0] for r in results]
    npts = sum(r[2] for r in results)
    depth = np.zeros(n)
    if outs:
        stacked = outs[0] if len(outs) == 1 else T.concat(outs, axis=0)
        depth[idx] = np.concatenate([r[1] for r in results])
        full = T.scatter_rows(stacked, idx, n, 0.0)
    else:
        full = T.Tensor(np.zeros((n, C), dtype=dtype))
    return RenderResult(full, depth, camera.width, camera.height, npts)


def with_background(res: RenderResult, background) -> T.Tensor:
    """(H, W, 3 + C + 1) image tensor with color composited over ``background``."""
    H, W = res.height, res.width
    img = T.reshape(res.out, (H, W, res.out.shape[-1]))
    alpha = img[..., -1:]
    bg = np.asarray(background, dtype=img.dtype)
    if not np.any(bg):
        return img
    rgb = T.add(img[..., :3], T.mul(T.sub(1.0, alpha), bg))
    return T.concat([rgb, img[..., 3:]], axis=-1)


def to_feature_image(img: T.Tensor, depth: np.ndarray) -> FeatureImage:
    a = img.data
    H, W = a.shape[:2]
    return FeatureImage(a[..., :3].copy(), a[..., 3:-1].copy(), a[..., -1].copy(), depth.reshape(H, W).copy())


def render_feature_image(fieldnet: RadianceField, ctx: FrameContext, camera: Camera, rcfg: RenderConfig,
                         rng=None, skin_weights=None, dtype=None) -> FeatureImage:
    res = render(fieldnet, ctx, camera, rcfg, rng, skin_weights, dtype)
    return to_feature_image(with_background(res, rcfg.background), res.depth)


# ---------------------------------------------------------------------------
# image IO


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, rgb: np.ndarray) -> None:
    arr = np.asarray(rgb)
    arr = arr if arr.dtype == np.uint8 else to_uint8(arr)
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """Float image in [0, 1]; grayscale files come back as (H, W)."""
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


def save_hfim(path, img: FeatureImage) -> None:
    data = img.stacked().astype("<f4")
    H, W, C = data.shape
    with open(path, "wb") as fh:
        fh.write(HFIM_MAGIC)
        fh.write(struct.pack("<III", W, H, C))
        fh.write(data.tobytes())


def load_hfim(path, feature_channels: int | None = None) -> FeatureImage:
    buf = Path(path).read_bytes()
    if buf[:4] != HFIM_MAGIC:
        raise ValueError(f"{path}: not a feature image (bad magic)")
    W, H, C = struct.unpack_from("<III", buf, 4)
    data = np.frombuffer(buf, dtype="<f4", offset=16, count=W * H * C).reshape(H, W, C)
    if feature_channels is not None and C != feature_channels + 5:
        raise ValueError(f"{path}: expected {feature_channels + 5} channels, found {C}")
    data = data.astype(np.float64)
    return FeatureImage(data[..., :3], data[..., 3:-2], data[..., -2], data[..., -1])
