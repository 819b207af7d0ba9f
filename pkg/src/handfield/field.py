"""Hand radiance fields: naive xyz conditioning, per-bone canonicalization, uvh canonicalization.

All variants map encoded inputs to (color, feature, density). A field owns its
parameters inside a :class:`ParamStore` under the ``field/`` prefix.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from . import mesh_geometry as mg
from .camera import ConfigError
from .core import tensor as T
from .core.encoding import EncodingConfig, positional_encode
from .core.layers import add_dense
from .core.optim import ParamStore
from .hand_model import HandParams, PosedMesh, RiggedTemplate, forward_kinematics

VARIANTS = ("xyz", "per_bone", "uvh")
POSE_DIM = 48


@dataclass
class FieldConfig:
    variant: str = "uvh"
    pose_conditioning: bool = True
    width: int = 128
    depth: int = 6
    inject_after: int = 4
    pos_freqs: int = 10
    dir_freqs: int = 4
    feature_channels: int = 29
    # per-bone variant: one small MLP per joint
    bone_width: int = 48
    bone_depth: int = 4
    bone_inject_after: int = 3
    density_scale: float = 1000.0  # 1/m per unit of softplus output; opaque through the shell at init
    h_scale: float = 100.0  # uvh height is multiplied by this before encoding
    xyz_center: tuple = (-0.03, 0.09, -0.01)
    xyz_scale: float = 0.12

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown field variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("width", "depth", "bone_width", "bone_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"field {name} must be >= 1")
        if self.feature_channels < 0:
            raise ConfigError("feature_channels must be >= 0")
        self.xyz_center = tuple(float(c) for c in self.xyz_center)

    @property
    def pos_encoding(self) -> EncodingConfig:
        return EncodingConfig(self.pos_freqs, True)

    @property
    def dir_encoding(self) -> EncodingConfig:
        return EncodingConfig(self.dir_freqs, True)

    @property
    def out_channels(self) -> int:
        return 1 + 3 + self.feature_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["xyz_center"] = list(self.xyz_center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown field config keys {sorted(unknown)}")
        return cls(**known)


@dataclass
class FieldOutput:
    c: np.ndarray  # (N, 3) in [0, 1]
    f: np.ndarray  # (N, feature_channels)
    sigma: np.ndarray  # (N,) >= 0, 1/m


@dataclass
class BoneWeights:
    w: np.ndarray  # (N, J), rows sum to one


@dataclass
class FrameContext:
    """Per-frame geometry shared by every sample of one rendered image."""

    params: HandParams
    mesh: PosedMesh
    bvh: mg.TriangleBVH
    xi: np.ndarray
    joint_inv: np.ndarray  # (J, 4, 4) inverse global joint transforms
    kdtree: cKDTree = dc_field(repr=False)


def make_context(template: RiggedTemplate, params: HandParams, mesh: PosedMesh | None = None) -> FrameContext:
    from .hand_model import skin

    mesh = skin(template, params) if mesh is None else mesh
    G = forward_kinematics(template, params.pose)
    return FrameContext(params, mesh, mg.build_bvh(mesh), params.pose.xi.copy(), np.linalg.inv(G),
                        cKDTree(mesh.vertices))


def bone_weights_for_point(x, mesh: PosedMesh, skin_weights: np.ndarray, tree: cKDTree | None = None) -> BoneWeights:
    """Skinning weights of the nearest posed-mesh vertex (lowest index on ties)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tree = cKDTree(mesh.vertices) if tree is None else tree
    _, idx = tree.query(x, k=1)
    return BoneWeights(skin_weights[idx])


class RadianceField:
    """MLP field with late injection of the direction / pose conditioning vector."""

    def __init__(self, cfg: FieldConfig, store: ParamStore, n_joints: int, rng: np.random.Generator | int = 0,
                 prefix: str = "field"):
        self.cfg = cfg
        self.store = store
        self.n_joints = n_joints
        self.prefix = prefix
        self.view_blend = 1.0  # training may fade the direction encoding in from a constant
        rng = np.random.default_rng(rng)
        pos_dim = cfg.pos_encoding.out_dim(3)
        cond_dim = cfg.dir_encoding.out_dim(3) + (POSE_DIM if cfg.pose_conditioning else 0)
        if cfg.variant == "per_bone":
            self.width, self.depth, self.inject = cfg.bone_width, cfg.bone_depth, cfg.bone_inject_after
            batch = n_joints
        else:
            self.width, self.depth, self.inject = cfg.width, cfg.depth, cfg.inject_after
            batch = None
        self.inject = min(self.inject, self.depth)
        fan = pos_dim
        for i in range(self.depth):
            if i == self.inject:
                fan += cond_dim
            add_dense(store, f"{prefix}/l{i}", fan, self.width, rng, batch=batch)
            fan = self.width
        if self.inject == self.depth:
            fan += cond_dim
        add_dense(store, f"{prefix}/head", fan, cfg.out_channels, rng, gain=1.0, batch=batch)

    # -- parameter bookkeeping ------------------------------------------------

    def num_params(self) -> int:
        return self.store.num_values(self.prefix + "/")

    def zero_heads(self):
        for n in (f"{self.prefix}/head/w", f"{self.prefix}/head/b"):
            self.store[n].data[...] = 0.0

    # -- input construction (no gradients) -------------------------------------

    def _cond(self, dirs: np.ndarray, xi: np.ndarray) -> np.ndarray:
        enc = positional_encode(dirs, self.cfg.dir_encoding)
        if self.view_blend != 1.0:
            enc0 = positional_encode(np.zeros_like(dirs), self.cfg.dir_encoding)
            enc = enc0 + self.view_blend * (enc - enc0)
        if not self.cfg.pose_conditioning:
            return enc
        xi = np.broadcast_to(np.asarray(xi, dtype=enc.dtype), enc.shape[:-1] + (POSE_DIM,))
        return np.concatenate([enc, xi], axis=-1)

    def encode_xyz(self, x: np.ndarray) -> np.ndarray:
        c = np.asarray(self.cfg.xyz_center, dtype=x.dtype)
        return positional_encode((x - c) / self.cfg.xyz_scale, self.cfg.pos_encoding)

    def encode_uvh(self, uvh: np.ndarray) -> np.ndarray:
        s = np.array([1.0, 1.0, self.cfg.h_scale], dtype=uvh.dtype)
        return positional_encode(uvh * s, self.cfg.pos_encoding)

    def inputs(self, points: np.ndarray, dirs: np.ndarray, ctx: FrameContext, skin_weights: np.ndarray | None = None):
        """Encoded (pos, cond, bone weights or None) for world-space samples of one frame."""
        dt = points.dtype
        cond = self._cond(dirs, ctx.xi.astype(dt))
        v = self.cfg.variant
        if v == "uvh":
            uvh = mg.canonicalize_many(ctx.bvh, ctx.mesh, points.astype(np.float64)).astype(dt)
            return self.encode_uvh(uvh), cond, None
        if v == "xyz":
            return self.encode_xyz(points - ctx.params.t.astype(dt)), cond, None
        if skin_weights is None:
            raise ConfigError("per-bone field needs the template skinning weights")
        w = bone_weights_for_point(points, ctx.mesh, skin_weights, ctx.kdtree).w.astype(dt)
        local = self.bone_local(points, ctx)
        return self.encode_xyz(local), cond, w

    @staticmethod
    def bone_local(points: np.ndarray, ctx: FrameContext) -> np.ndarray:
        """(J, N, 3) coordinates of each point in each bone's rest frame."""
        p = (points - ctx.params.t).astype(np.float64)
        Ginv = ctx.joint_inv
        local = np.matmul(p[None], np.swapaxes(Ginv[:, :3, :3], 1, 2)) + Ginv[:, None, :3, 3]
        return local.astype(points.dtype)

    # -- network ----------------------------------------------------------------

    def _mlp(self, pos, cond):
        p = self.prefix
        h = T.as_tensor(pos)
        for i in range(self.depth):
            if i == self.inject:
                h = T.concat([h, cond], axis=-1)
            h = T.relu(T.linear(h, self.store[f"{p}/l{i}/w"], self.store[f"{p}/l{i}/b"]))
        if self.inject == self.depth:
            h = T.concat([h, cond], axis=-1)
        return T.linear(h, self.store[f"{p}/head/w"], self.store[f"{p}/head/b"])

    def _heads(self, raw):
        sigma = T.mul(T.softplus(raw[..., 0]), self.cfg.density_scale)
        rgb = T.sigmoid(raw[..., 1:4])
        feat = raw[..., 4:]
        return sigma, rgb, feat

    def forward(self, pos: np.ndarray, cond: np.ndarray, bone_w: np.ndarray | None = None):
        """Tensors (sigma (N,), rgb (N, 3), feat (N, F)) for encoded inputs.

        For the per-bone variant ``pos`` is (J, N, P) and outputs are blended by ``bone_w`` (N, J).
        """
        if self.cfg.variant != "per_bone":
            return self._heads(self._mlp(pos, cond))
        J = self.n_joints
        cond_b = np.broadcast_to(cond, (J,) + cond.shape)
        sig, rgb, feat = self._heads(self._mlp(pos, cond_b))  # (J, N), (J, N, 3), (J, N, F)
        wt = np.ascontiguousarray(bone_w.T)  # (J, N)
        sigma = T.sum(T.mul(sig, wt), axis=0)
        rgb = T.clip(T.sum(T.mul(rgb, wt[:, :, None]), axis=0), 0.0, 1.0)
        feat = T.sum(T.mul(feat, wt[:, :, None]), axis=0)
        return sigma, rgb, feat

    def evaluate(self, points, dirs, ctx: FrameContext, skin_weights=None):
        pos, cond, w = self.inputs(points, dirs, ctx, skin_weights)
        return self.forward(pos, cond, w)


def _output(sigma, rgb, feat) -> FieldOutput:
    return FieldOutput(rgb.data, feat.data, sigma.data)


def eval_naive(fieldnet: RadianceField, x, d, xi) -> FieldOutput:
    x, d = np.atleast_2d(x), np.atleast_2d(d)
    return _output(*fieldnet.forward(fieldnet.encode_xyz(x), fieldnet._cond(d, xi)))


def eval_uvh(fieldnet: RadianceField, uvh, d, xi) -> FieldOutput:
    uvh, d = np.atleast_2d(uvh), np.atleast_2d(d)
    return _output(*fieldnet.forward(fieldnet.encode_uvh(uvh), fieldnet._cond(d, xi)))


def eval_per_bone(fieldnet: RadianceField, x_local, d, xi, weights: BoneWeights) -> FieldOutput:
    """``x_local`` (J, N, 3): each point already expressed in each bone's rest frame."""
    d = np.atleast_2d(d)
    return _output(*fieldnet.forward(fieldnet.encode_xyz(np.asarray(x_local)), fieldnet._cond(d, xi), weights.w))
