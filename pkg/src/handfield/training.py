"""Avatar model, losses, color calibration and the optimization loop."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Camera, ConfigError
from .config import ExperimentConfig
from .core import tensor as T
from .core.checkpoint import load_into, read_records, save_store
from .core.layers import kaiming_uniform
from .core.optim import ParamStore, adam_step
from .core.tensor import Tape, Tensor
from .dataset import Dataset
from .field import FrameContext, RadianceField, make_context
from .hand_model import HandParams, RiggedTemplate, toy_hand
from .render import RenderConfig, render, with_background
from .sr import SRConfig, SuperResolution

# ---------------------------------------------------------------------------
# frozen feature pyramid


class FeatureExtractor:
    """Five stages of (conv3x3 + relu) x 2, with 2x average pooling between stages."""

    def __init__(self, channels=(8, 16, 32, 32, 32), seed: int = 7, dtype=np.float64, weights: dict | None = None):
        self.channels = tuple(channels)
        self.dtype = np.dtype(dtype)
        self.w = {}
        rng = np.random.default_rng(seed)
        cin = 3
        for s, c in enumerate(self.channels):
            for k in range(2):
                name = f"stage{s}/conv{k}"
                if weights is not None:
                    w, b = weights[f"{name}/w"], weights[f"{name}/b"]
                else:
                    w, b = kaiming_uniform(rng, 9 * cin, (3, 3, cin, c)), np.zeros(c)
                self.w[name] = (Tensor(np.asarray(w, dtype=self.dtype)), Tensor(np.asarray(b, dtype=self.dtype)))
                cin = c
        self.cache: dict = {}  # features of fixed training targets, keyed by the caller

    @classmethod
    def from_file(cls, path, channels=(8, 16, 32, 32, 32), dtype=np.float64) -> "FeatureExtractor":
        return cls(channels, 0, dtype, read_records(path))

    def features(self, img) -> list:
        """Per-stage activations; stages past the point where the image pools below 1x1 are omitted."""
        x = T.as_tensor(img)
        x = T.mul(T.sub(x, 0.5), 2.0)
        out = []
        for s in range(len(self.channels)):
            if s:
                h, w = x.shape[:2]
                if h < 2 or w < 2:
                    break
                if h % 2 or w % 2:
                    x = x[: h - h % 2, : w - w % 2]
                x = T.avg_pool_2x(x)
            for k in range(2):
                w_, b_ = self.w[f"stage{s}/conv{k}"]
                x = T.relu(T.conv2d_3x3(x, w_, b_))
            out.append(x)
        return out


# ---------------------------------------------------------------------------
# losses


def box_downsample(img: np.ndarray, f: int = 2) -> np.ndarray:
    h, w = img.shape[:2]
    return img.reshape(h // f, f, w // f, f, *img.shape[2:]).mean(axis=(1, 3))


def loss_rec(G, I, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over the masked pixels and all channels."""
    I = T.as_tensor(I)
    G = np.asarray(G, dtype=I.dtype)
    diff = T.square(T.sub(I, G))
    if mask is None:
        return T.mean(diff)
    m = np.asarray(mask, dtype=I.dtype)[..., None]
    n = max(float(m.sum()) * diff.shape[-1], 1.0)
    return T.mul(T.sum(T.mul(diff, m)), 1.0 / n)


def loss_perc(G, I, extractor: FeatureExtractor, mode: str = "full", rng: np.random.Generator | None = None,
              patch: int = 64, target_key=None) -> Tensor:
    """Sum over the five stages of the mean squared feature difference.

    In full mode, ``target_key`` memoizes the features of ``G`` (a fixed training target).
    """
    I = T.as_tensor(I)
    G = np.asarray(G, dtype=I.dtype)
    if mode == "off":
        return Tensor(np.zeros((), dtype=I.dtype))
    if mode == "patch64":
        h, w = G.shape[:2]
        if h < patch or w < patch:
            raise ConfigError(f"patch perceptual loss needs images of at least {patch}x{patch}, got {w}x{h}")
        rng = np.random.default_rng(0) if rng is None else rng
        y0 = int(rng.integers(0, h - patch + 1))
        x0 = int(rng.integers(0, w - patch + 1))
        G = G[y0:y0 + patch, x0:x0 + patch]
        I = I[y0:y0 + patch, x0:x0 + patch]
    elif mode != "full":
        raise ConfigError(f"unknown perceptual mode {mode!r}")
    if mode == "full" and target_key is not None:
        fg = extractor.cache.get(target_key)
        if fg is None:
            fg = extractor.cache[target_key] = [f.data for f in extractor.features(Tensor(G))]
    else:
        fg = [f.data for f in extractor.features(Tensor(G))]
    fi = extractor.features(I)
    total = None
    for a, b in zip(fi, fg):
        term = T.mean(T.square(T.sub(a, b)))
        total = term if total is None else T.add(total, term)
    return total


def supervision_mask(fg_mask: np.ndarray, alpha: np.ndarray, stride: int) -> np.ndarray:
    """Foreground, or rendered coverage, or a sparse background lattice."""
    m = fg_mask | (alpha > 0)
    if stride > 0:
        lat = np.zeros_like(m)
        lat[::stride, ::stride] = True
        m = m | lat
    return m


def color_calibrate(image, cam: int, store: ParamStore) -> Tensor:
    """Channelwise affine ``g_j * image + b_j`` for camera index ``cam``."""
    g = store["calib/gain"][cam]
    b = store["calib/bias"][cam]
    return T.add(T.mul(T.as_tensor(image), g), b)


# ---------------------------------------------------------------------------
# model


class Avatar:
    """Field + optional super-resolution + per-camera calibration sharing one parameter store."""

    def __init__(self, cfg: ExperimentConfig, template: RiggedTemplate | None = None, n_cameras: int = 1,
                 seed: int | None = None):
        self.cfg = cfg
        self.template = toy_hand() if template is None else template
        seed = cfg.train.seed if seed is None else seed
        self.store = ParamStore(np.dtype(cfg.train.dtype))
        nj = self.template.joint_parents.shape[0]
        self.field = RadianceField(cfg.field, self.store, nj, np.random.default_rng([seed, 1]))
        self.sr = SuperResolution(cfg.sr, self.store, np.random.default_rng([seed, 2])) if cfg.use_sr else None
        # camera 0 fixes the color gauge; the others adapt to it
        frozen = np.ones((n_cameras, 3))
        frozen[0] = 0.0
        self.store.add("calib/gain", np.ones((n_cameras, 3)), trainable=cfg.train.calibrate,
                       lr_scale=cfg.train.calib_lr_scale, grad_mask=frozen)
        self.store.add("calib/bias", np.zeros((n_cameras, 3)), trainable=cfg.train.calibrate,
                       lr_scale=cfg.train.calib_lr_scale, grad_mask=frozen)
        self._ctx: dict = {}
        self.threads: int | None = None  # renderer thread pool size for inference
        self.train_seconds = 0.0  # cumulative optimization wall time

    @property
    def n_cameras(self) -> int:
        return int(self.store["calib/gain"].shape[0])

    def context(self, params: HandParams, key=None) -> FrameContext:
        if key is None:
            return make_context(self.template, params)
        if key not in self._ctx:
            self._ctx[key] = make_context(self.template, params)
        return self._ctx[key]

    def _render_cfg(self, strategy: str | None) -> RenderConfig:
        rc = self.cfg.render
        if strategy is not None and strategy != rc.strategy:
            rc = RenderConfig(**{**rc.to_dict(), "strategy": strategy})
        return rc

    def forward(self, ctx: FrameContext, camera: Camera, rng=None, strategy: str | None = None, use_sr=None):
        """Returns (full-res color tensor, low-res stacked image tensor or None).

        With SR the field renders at half the camera resolution and SR doubles it;
        without SR the field renders directly at the camera resolution.
        """
        rc = self._render_cfg(strategy)
        use_sr = self.cfg.use_sr if use_sr is None else use_sr
        sw = self.template.skin_weights
        if use_sr:
            low = camera.scaled(0.5)
            res = render(self.field, ctx, low, rc, rng, sw, threads=self.threads)
            img = with_background(res, rc.background)
            x = img[..., :-1]
            return self.sr.forward(x), img
        res = render(self.field, ctx, camera, rc, rng, sw, threads=self.threads)
        img = with_background(res, rc.background)
        return img[..., :3], img

    def predict(self, params: HandParams, camera: Camera, cam_index: int | None = None, strategy=None,
                key=None, use_sr=None) -> np.ndarray:
        """Inference image in [0, 1]; calibrated to camera ``cam_index`` when given."""
        ctx = self.context(params, key)
        rgb, _ = self.forward(ctx, camera, None, strategy, use_sr)
        if cam_index is not None:
            rgb = color_calibrate(rgb, cam_index, self.store)
        return np.clip(rgb.data.astype(np.float64), 0.0, 1.0)

    def num_params(self, prefix: str) -> int:
        return self.store.num_values(prefix)

    # -- persistence -------------------------------------------------------------

    def save(self, out_dir, step: int, with_optimizer: bool = True) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_store(self.store, out / "model.hfld", with_optimizer)
        self.cfg.save(out / "config.json")
        state = {"step": step, "n_cameras": self.n_cameras, "train_seconds": self.train_seconds}
        (out / "state.json").write_text(json.dumps(state))

    @classmethod
    def load(cls, ckpt_dir, template: RiggedTemplate | None = None) -> tuple["Avatar", int]:
        d = Path(ckpt_dir)
        if not (d / "model.hfld").exists():
            raise FileNotFoundError(f"{d}: no model.hfld checkpoint")
        cfg = ExperimentConfig.load(d / "config.json")
        state = json.loads((d / "state.json").read_text())
        if template is None and (d / "template.json").exists():
            from .hand_model import load_template

            template = load_template(d / "template.json")
        av = cls(cfg, template, state["n_cameras"])
        load_into(av.store, d / "model.hfld")
        av.train_seconds = float(state.get("train_seconds", 0.0))
        av.field.view_blend = view_blend(cfg.train, int(state["step"]))
        return av, int(state["step"])


# ---------------------------------------------------------------------------
# optimization


@dataclass
class Batch:
    frame: int
    cam: int
    params: HandParams
    camera: Camera
    target: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) bool


def pick_batch(ds: Dataset, seed: int, step: int) -> tuple[Batch, np.random.Generator]:
    """Deterministic (frame, camera) choice for ``step`` and the step's RNG."""
    rng = np.random.default_rng([seed, step])
    train = ds.indices("train")
    p = train[int(rng.integers(len(train)))]
    j = int(rng.integers(len(ds.cameras)))
    fr = ds.frames[p]
    return Batch(p, j, fr.params, ds.cameras[j], fr.images[j], fr.masks[j]), rng


def compute_loss(av: Avatar, batch: Batch, extractor: FeatureExtractor, rng) -> tuple[Tensor, dict]:
    cfg = av.cfg
    lc = cfg.loss
    dt = av.store.dtype
    ctx = av.context(batch.params, key=batch.frame)
    rgb, img = av.forward(ctx, batch.camera, rng)
    G = batch.target.astype(dt)
    parts: dict = {}
    total = Tensor(np.zeros((), dtype=dt))

    def add_terms(pred, target, mask, weight, tag, allow_perc):
        nonlocal total
        pred = color_calibrate(pred, batch.cam, av.store)
        if lc.rec_weight > 0:
            r = loss_rec(target, pred, mask)
            parts[f"rec_{tag}"] = float(r.data)
            total = T.add(total, T.mul(r, weight * lc.rec_weight))
        if lc.perc_weight > 0 and lc.perc_mode != "off" and allow_perc:
            pl = loss_perc(target, pred, extractor, lc.perc_mode, rng, lc.patch_size,
                           target_key=(batch.frame, batch.cam, tag))
            parts[f"perc_{tag}"] = float(pl.data)
            total = T.add(total, T.mul(pl, weight * lc.perc_weight))

    alpha = img.data[..., -1]
    if lc.alpha_weight > 0:
        # an opaque surface keeps colour from trading off against coverage over the black background
        cover = batch.mask.astype(dt)
        while cover.shape[0] > alpha.shape[0]:
            cover = box_downsample(cover)
        a = loss_rec(cover[..., None], img[..., -1:])
        parts["alpha"] = float(a.data)
        total = T.add(total, T.mul(a, lc.alpha_weight))
    if cfg.use_sr:
        if lc.apply_low_res:
            G_low = box_downsample(G)
            m_low = supervision_mask(box_downsample(batch.mask.astype(float)) > 0, alpha, lc.lattice_stride // 2)
            fits = min(G_low.shape[:2]) >= lc.patch_size
            add_terms(img[..., :3], G_low, m_low, lc.low_res_weight, "low", lc.perc_mode == "full" or fits)
        if lc.apply_high_res:
            a_up = np.repeat(np.repeat(alpha, 2, axis=0), 2, axis=1)
            m_hi = supervision_mask(batch.mask, a_up, lc.lattice_stride)
            add_terms(rgb, G, m_hi, lc.high_res_weight, "high", True)
    else:
        m = supervision_mask(batch.mask, alpha, lc.lattice_stride)
        add_terms(rgb, G, m, 1.0, "full", True)
    parts["total"] = float(total.data)
    return total, parts


def learning_rate(tc, step: int) -> float:
    if tc.steps <= 1:
        return tc.lr
    return tc.lr * tc.lr_final_ratio ** (step / (tc.steps - 1))


def view_blend(tc, step: float) -> float:
    """Weight of the view-direction encoding: 0 for the first half of the warm-up, then a linear ramp to 1.

    With a constant direction, per-camera color differences can only be explained by the
    calibration, so gains settle before the field gains the freedom to absorb them.
    """
    w = tc.view_warmup * tc.steps
    if w <= 0:
        return 1.0
    return float(np.clip(2.0 * step / w - 1.0, 0.0, 1.0))


def train_step(av: Avatar, ds: Dataset, step: int, extractor: FeatureExtractor) -> dict:
    tc = av.cfg.train
    av.field.view_blend = view_blend(tc, step)
    batch, rng = pick_batch(ds, tc.seed, step)
    with Tape() as tape:
        loss, parts = compute_loss(av, batch, extractor, rng)
    if loss.requires_grad:
        tape.backward(loss)
    adam_step(av.store, learning_rate(tc, step), tc.beta1, tc.beta2, tc.eps)
    parts.update(frame=batch.frame, cam=batch.cam)
    return parts


def make_extractor(cfg: ExperimentConfig, dtype) -> FeatureExtractor:
    ec = cfg.extractor
    if ec.weights_file:
        return FeatureExtractor.from_file(ec.weights_file, ec.channels, dtype)
    return FeatureExtractor(ec.channels, ec.seed, dtype)


def train(ds: Dataset, cfg: ExperimentConfig, out_dir=None, resume: bool = True, log=None,
          max_steps: int | None = None) -> Avatar:
    """Seeded, resumable optimization. Checkpoints and a JSONL log go to ``out_dir``."""
    from .metrics import evaluate

    ds.validate()
    out = Path(out_dir) if out_dir is not None else None
    start = 0
    if out is not None and resume and (out / "model.hfld").exists():
        av, start = Avatar.load(out, ds.template)
        saved, want = json.loads(json.dumps(av.cfg.to_dict())), json.loads(json.dumps(cfg.to_dict()))
        saved["train"]["steps"] = want["train"]["steps"]  # extending a finished run is allowed
        if saved != want:
            raise ConfigError(f"{out} holds a checkpoint trained with a different config; use a new directory")
        av.cfg = cfg
    else:
        av = Avatar(cfg, ds.template, len(ds.cameras))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if ds.template is not None:
            from .hand_model import save_template

            save_template(ds.template, out / "template.json")
        (out / "cameras.json").write_text(json.dumps({"cameras": [c.to_dict() for c in ds.cameras]}, indent=1))
    tc = av.cfg.train
    extractor = make_extractor(av.cfg, av.store.dtype)
    end = tc.steps if max_steps is None else min(tc.steps, start + max_steps)
    logf = open(out / "log.jsonl", "a") if out is not None else None
    t0 = time.perf_counter() - av.train_seconds  # wall time accumulates across resumes
    try:
        for step in range(start, end):
            parts = train_step(av, ds, step, extractor)
            done = step + 1
            rec = None
            if tc.eval_every and (done % tc.eval_every == 0 or done == tc.steps) and ds.indices("heldout"):
                ev = evaluate(av, ds, "heldout", cams=tc.eval_cameras)
                rec = {"step": done, "heldout_psnr": ev["psnr"], "elapsed": time.perf_counter() - t0}
            if logf is not None and (rec is not None or done % 50 == 0):
                logf.write(json.dumps(rec or {"step": done, **parts}) + "\n")
                logf.flush()
            if log is not None and (rec is not None or done % 100 == 0):
                log(rec or {"step": done, **parts})
            av.train_seconds = time.perf_counter() - t0
            if out is not None and (done % tc.checkpoint_every == 0 or done == end):
                av.save(out, done)
    finally:
        if logf is not None:
            logf.close()
    av.field.view_blend = view_blend(tc, end)
    return av
