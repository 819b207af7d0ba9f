"""Procedural multi-view hand dataset with a closed-form, pose-dependent appearance."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import mesh_geometry as mg
from .camera import Camera, ConfigError
from .dataset import Dataset, Frame
from .hand_model import (
    FINGER_U0, FINGER_U_WIDTH, FINGERS, HandParams, PosedMesh, RiggedTemplate, finger_joint_arclengths,
    flexion_axis, skin, toy_hand,
)

SKIN = np.array([0.66, 0.5, 0.42])
DARK = np.array([0.42, 0.3, 0.26])
VEIN = np.array([0.36, 0.36, 0.5])
NAIL = np.array([0.7, 0.58, 0.6])
JOINT_RATIOS = (1.0, 0.9, 0.7)  # share of a finger's curl taken by MCP, PIP, DIP


@dataclass
class SceneRecipe:
    template: str = "toy_hand"
    texture: str = "checker_veins_nails"
    checker_freq: float = 8.0  # cells per uv unit
    crease_coeff: float = 0.5  # darkening per radian of joint flexion
    crease_width: float = 0.04  # gaussian width of a crease along the finger (v units)
    light_dir: tuple = (0.25, 0.35, 1.0)
    ambient: float = 0.3
    n_cameras: int = 8
    radius: float = 0.45
    cap_angle_deg: float = 70.0
    target: tuple = (-0.03, 0.09, -0.01)
    width: int = 128
    height: int = 96
    focal: float = 170.0
    near: float = 0.3
    far: float = 0.6
    background: tuple = (0.0, 0.0, 0.0)
    # (camera id, gain, bias) applied to that camera's images
    perturbations: list = field(default_factory=lambda: [[3, 1.3, 0.05]])
    n_train: int = 32
    n_heldout: int = 4
    flex_max: float = 1.2
    rot_max: float = 0.35
    supersample: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.template != "toy_hand":
            raise ConfigError(f"unknown template {self.template!r}")
        if self.texture != "checker_veins_nails":
            raise ConfigError(f"unknown texture {self.texture!r}")
        if self.n_cameras < 1 or self.width < 1 or self.height < 1 or self.supersample < 1:
            raise ConfigError("recipe sizes must be positive")
        if not 0.0 <= self.ambient <= 1.0:
            raise ConfigError("ambient must lie in [0, 1]")
        if not self.near < self.far:
            raise ConfigError("recipe near must be < far")
        for cam, g, b in self.perturbations:
            if not 0 <= int(cam) < self.n_cameras:
                raise ConfigError(f"perturbed camera {cam} out of range")
        self.light_dir = tuple(float(x) for x in self.light_dir)
        self.target = tuple(float(x) for x in self.target)
        self.background = tuple(float(x) for x in self.background)

    @property
    def light(self) -> np.ndarray:
        v = np.asarray(self.light_dir, dtype=np.float64)
        return v / np.linalg.norm(v)

    def gain_bias(self, cam: int):
        g, b = np.ones(3), np.zeros(3)
        for c, gg, bb in self.perturbations:
            if int(c) == cam:
                g, b = np.full(3, float(gg)), np.full(3, float(bb))
        return g, b

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("light_dir", "target", "background"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneRecipe":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown recipe keys {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# appearance


def _finger_column(u):
    col = np.floor((u - FINGER_U0) / 0.1).astype(np.int64)
    local = (u - FINGER_U0 - 0.1 * col) / FINGER_U_WIDTH
    ok = (u >= FINGER_U0) & (col >= 0) & (col < len(FINGERS)) & (local <= 1.0)
    return np.where(ok, col, -1), local


def albedo(uv, recipe: SceneRecipe | None = None) -> np.ndarray:
    """Procedural skin albedo at texture coordinates ``uv`` (..., 2); every channel <= 0.7."""
    recipe = SceneRecipe() if recipe is None else recipe
    uv = np.asarray(uv, dtype=np.float64)
    u, v = uv[..., 0], uv[..., 1]
    k = recipe.checker_freq
    checker = (np.floor(k * u) + np.floor(k * v)) % 2
    col = SKIN + (DARK - SKIN) * 0.5 * checker[..., None]
    # veins: two wavy stripes on the dorsal palm chart
    dorsal = (u >= 0.02) & (u <= 0.43) & (v >= 0.02) & (v <= 0.43)
    vein = np.zeros_like(u)
    for c0, amp, ph in ((0.15, 0.03, 0.0), (0.3, 0.025, 1.3)):
        curve = c0 + amp * np.sin(2 * np.pi * 3.0 * v + ph)
        vein = np.maximum(vein, np.exp(-(((u - curve) / 0.012) ** 2)))
    vein = np.where(dorsal, vein, 0.0)
    col = col + (VEIN - col) * vein[..., None]
    # fingernails: dorsal strip near each fingertip
    fc, local = _finger_column(u)
    nail = (fc >= 0) & (v > 0.82) & (local > 0.15) & (local < 0.35)
    col = np.where(nail[..., None], NAIL, col)
    return col


def joint_angles(theta) -> np.ndarray:
    """(15,) rotation angle of each articulated joint."""
    return np.linalg.norm(np.asarray(theta, dtype=np.float64).reshape(15, 3), axis=1)


def crease_factor(uv, theta, recipe: SceneRecipe | None = None) -> np.ndarray:
    """Multiplicative darkening in (0, 1] from bent joints; 1 for a flat hand."""
    recipe = SceneRecipe() if recipe is None else recipe
    uv = np.asarray(uv, dtype=np.float64)
    u, v = uv[..., 0], uv[..., 1]
    ang = joint_angles(theta)
    fc, _ = _finger_column(u)
    out = np.ones_like(u)
    for f, spec in enumerate(FINGERS):
        s_tip = sum(spec.segments) + spec.radius * (1.0 - 0.12)
        on = fc == f
        for k, s_j in enumerate(finger_joint_arclengths(spec)):
            a = ang[3 * f + k]
            bump = np.exp(-(((v - s_j / s_tip) / recipe.crease_width) ** 2))
            out = np.where(on, out * (1.0 - np.clip(recipe.crease_coeff * a, 0.0, 0.9) * bump), out)
    return out


def oracle_shade(uv, normal, theta, recipe: SceneRecipe | None = None) -> np.ndarray:
    """Closed-form color: albedo x crease darkening x (ambient + diffuse Lambert)."""
    recipe = SceneRecipe() if recipe is None else recipe
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    lam = np.clip(n @ recipe.light, 0.0, None)
    shade = recipe.ambient + (1.0 - recipe.ambient) * lam
    return albedo(uv, recipe) * crease_factor(uv, theta, recipe)[..., None] * shade[..., None]


# ---------------------------------------------------------------------------
# rig and poses


def camera_rig(recipe: SceneRecipe) -> list[Camera]:
    """Cameras on a spherical cap around +z (the back of the hand), looking at the target."""
    n = recipe.n_cameras
    cap = np.deg2rad(recipe.cap_angle_deg)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    cams = []
    tgt = np.asarray(recipe.target)
    for i in range(n):
        frac = (i + 0.5) / n
        polar = np.arccos(1.0 - frac * (1.0 - np.cos(cap)))
        az = i * golden
        d = np.array([np.sin(polar) * np.cos(az), np.sin(polar) * np.sin(az), np.cos(polar)])
        cams.append(Camera.look_at(tgt + recipe.radius * d, tgt, [0.0, 1.0, 0.0], recipe.focal, recipe.focal,
                                   recipe.width, recipe.height, recipe.near, recipe.far, i))
    return cams


def curl_pose(curls, R=(0.0, 0.0, 0.0), t=(0.0, 0.0, 0.0)) -> HandParams:
    """Pose with per-finger curl amounts spread over the three joints of each finger."""
    theta = np.zeros((15, 3))
    for f, c in enumerate(curls):
        ax = flexion_axis(f)
        for k, r in enumerate(JOINT_RATIOS):
            theta[3 * f + k] = ax * c * r
    return HandParams(theta.reshape(-1), np.zeros(10), np.asarray(t, float), np.asarray(R, float))


def sample_poses(recipe: SceneRecipe) -> list[HandParams]:
    rng = np.random.default_rng([recipe.seed, 1])
    out = []
    for _ in range(recipe.n_train + recipe.n_heldout):
        curls = rng.uniform(0.0, recipe.flex_max, size=len(FINGERS))
        R = rng.uniform(-recipe.rot_max, recipe.rot_max, size=3)
        out.append(curl_pose(curls, R))
    return out


# ---------------------------------------------------------------------------
# rendering


def _interp(depth: mg.DepthMap, mesh: PosedMesh):
    hit = depth.triangle_id >= 0
    tri = np.where(hit, depth.triangle_id, 0)
    bary = depth.barycentric
    uv = np.einsum("hwk,hwkc->hwc", bary, mesh.corner_uv[tri])
    n = np.einsum("hwk,hwkc->hwc", bary, mesh.vertex_normals[mesh.faces[tri]])
    n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    return hit, uv, n


def render_truth(mesh: PosedMesh, params: HandParams, camera: Camera, recipe: SceneRecipe):
    """Anti-aliased shaded image and binary mask before any camera perturbation."""
    s = recipe.supersample
    hi = camera.scaled(s)
    dm = mg.rasterize_depth(mesh, hi)
    hit, uv, n = _interp(dm, mesh)
    rgb = np.where(hit[..., None], oracle_shade(uv, n, params.theta, recipe), np.asarray(recipe.background))
    H, W = camera.height, camera.width
    img = rgb.reshape(H, s, W, s, 3).mean(axis=(1, 3))
    cover = hit.reshape(H, s, W, s).mean(axis=(1, 3))
    return img, cover >= 0.5


def crease_image(mesh: PosedMesh, params: HandParams, camera: Camera, recipe: SceneRecipe) -> np.ndarray:
    """Per-pixel crease darkening factor (1 where nothing is darkened or nothing is hit)."""
    dm = mg.rasterize_depth(mesh, camera)
    hit, uv, _ = _interp(dm, mesh)
    return np.where(hit, crease_factor(uv, params.theta, recipe), 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_dataset(recipe: SceneRecipe, template: RiggedTemplate | None = None) -> Dataset:
    template = toy_hand() if template is None else template
    cams = camera_rig(recipe)
    frames = []
    for p, params in enumerate(sample_poses(recipe)):
        mesh = skin(template, params)
        images, masks = [], []
        for cam in cams:
            img, mask = render_truth(mesh, params, cam, recipe)
            g, b = recipe.gain_bias(cam.id)
            images.append(quantize(img * g + b))
            masks.append(mask)
        split = "train" if p < recipe.n_train else "heldout"
        frames.append(Frame(params, images, masks, split))
    return Dataset(cams, frames, template, recipe.to_dict())
