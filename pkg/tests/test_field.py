import numpy as np
import pytest
from hypothesis import given, strategies as st

from handfield.camera import ConfigError
from handfield.config import desk_config
from handfield.core import tensor as T
from handfield.core.gradcheck import grad_check
from handfield.core.optim import ParamStore
from handfield.field import (
    BoneWeights, FieldConfig, RadianceField, bone_weights_for_point, eval_naive, eval_per_bone, eval_uvh, make_context,
)
from handfield.hand_model import HandParams, skin
from handfield.synth import curl_pose

SMALL = dict(width=16, depth=3, inject_after=2, bone_width=8, bone_depth=2, bone_inject_after=1, pos_freqs=3,
             dir_freqs=2, feature_channels=4)


def make_field(variant="uvh", seed=0, **kw):
    cfg = FieldConfig(variant=variant, **{**SMALL, **kw})
    return RadianceField(cfg, ParamStore(), n_joints=16, rng=seed)


def mlp_oracle(store, prefix, depth, inject, pos, cond, bone=None):
    """Plain numpy forward pass of one MLP, optionally a single bone's slice."""
    def W(n):
        a = store[f"{prefix}/{n}"].data
        return a if bone is None else a[bone]
    h = pos
    for i in range(depth):
        if i == inject:
            h = np.concatenate([h, cond], axis=-1)
        h = np.maximum(h @ W(f"l{i}/w") + W(f"l{i}/b"), 0)
    if inject == depth:
        h = np.concatenate([h, cond], axis=-1)
    return h @ W("head/w") + W("head/b")


def softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)


def test_same_seed_same_parameters():
    a, b, c = make_field(seed=3), make_field(seed=3), make_field(seed=4)
    for n in a.store:
        np.testing.assert_array_equal(a.store[n].data, b.store[n].data)
    assert any(not np.array_equal(a.store[n].data, c.store[n].data) for n in a.store if n.endswith("/w"))


def test_zero_heads_closed_form():
    f = make_field()
    f.zero_heads()
    out = eval_uvh(f, np.random.default_rng(0).uniform(size=(5, 3)), np.tile([0, 0, 1.0], (5, 1)), np.zeros(48))
    np.testing.assert_allclose(out.c, 0.5)
    np.testing.assert_allclose(out.f, 0.0)
    np.testing.assert_allclose(out.sigma, f.cfg.density_scale * np.log(2.0))


@given(st.integers(0, 2**31 - 1))
def test_forward_matches_numpy_oracle_and_ranges(seed):
    rng = np.random.default_rng(seed)
    f = make_field(seed=seed % 7)
    uvh, d, xi = rng.uniform(-1, 1, (6, 3)), rng.normal(size=(6, 3)), rng.normal(size=48)
    out = eval_uvh(f, uvh, d, xi)
    raw = mlp_oracle(f.store, "field", f.depth, f.inject, f.encode_uvh(uvh), f._cond(d, xi))
    np.testing.assert_allclose(out.sigma, f.cfg.density_scale * softplus(raw[:, 0]), rtol=1e-12)
    np.testing.assert_allclose(out.c, 1 / (1 + np.exp(-raw[:, 1:4])), rtol=1e-12)
    np.testing.assert_allclose(out.f, raw[:, 4:], rtol=1e-12)
    assert np.all(out.sigma >= 0) and np.all((out.c >= 0) & (out.c <= 1))


def test_pose_conditioning_switch():
    rng = np.random.default_rng(1)
    x, d = rng.uniform(-0.05, 0.05, (4, 3)), rng.normal(size=(4, 3))
    xi_a, xi_b = np.zeros(48), rng.normal(size=48)
    on, off = make_field("xyz"), make_field("xyz", pose_conditioning=False)
    assert not np.allclose(eval_naive(on, x, d, xi_a).c, eval_naive(on, x, d, xi_b).c)
    np.testing.assert_array_equal(eval_naive(off, x, d, xi_a).c, eval_naive(off, x, d, xi_b).c)
    assert on.num_params() - off.num_params() == 48 * on.width


def test_per_bone_one_hot_equals_single_bone(rng):
    f = make_field("per_bone")
    n = 5
    local = rng.uniform(-0.1, 0.1, (16, n, 3))
    d, xi = rng.normal(size=(n, 3)), rng.normal(size=48)
    for j in (0, 7, 15):
        w = np.zeros((n, 16))
        w[:, j] = 1.0
        out = eval_per_bone(f, local, d, xi, BoneWeights(w))
        raw = mlp_oracle(f.store, "field", f.depth, f.inject, f.encode_xyz(local[j]), f._cond(d, xi), bone=j)
        np.testing.assert_allclose(out.sigma, f.cfg.density_scale * softplus(raw[:, 0]), rtol=1e-12)
        np.testing.assert_allclose(out.c, 1 / (1 + np.exp(-raw[:, 1:4])), rtol=1e-12)


def test_per_bone_blend_is_convex(rng):
    f = make_field("per_bone")
    local = rng.uniform(-0.1, 0.1, (16, 3, 3))
    d, xi = rng.normal(size=(3, 3)), np.zeros(48)
    w = rng.dirichlet(np.ones(16), size=3)
    outs = [eval_per_bone(f, local, d, xi, BoneWeights(np.eye(16)[[j] * 3])) for j in range(16)]
    blend = eval_per_bone(f, local, d, xi, BoneWeights(w))
    np.testing.assert_allclose(blend.sigma, sum(w[:, j] * outs[j].sigma for j in range(16)), rtol=1e-12)


def test_bone_weights_match_brute_force(template, rng):
    mesh = skin(template, curl_pose([0.4, 0.8, 0.2, 0.6, 1.0]))
    pts = mesh.vertices[rng.integers(0, len(mesh.vertices), 200)] + rng.normal(scale=0.004, size=(200, 3))
    got = bone_weights_for_point(pts, mesh, template.skin_weights).w
    d2 = ((pts[:, None] - mesh.vertices[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(got, template.skin_weights[np.argmin(d2, axis=1)])
    np.testing.assert_allclose(got.sum(1), 1.0, atol=1e-12)


def test_bone_local_inverts_rigid_motion(template, rng):
    params = HandParams(R=[0.3, -0.5, 0.2], t=[0.01, -0.02, 0.03])
    ctx = make_context(template, params)
    idx = rng.integers(0, len(template.rest_vertices), 20)
    local = RadianceField.bone_local(ctx.mesh.vertices[idx], ctx)
    assert local.shape == (16, 20, 3)
    for j in range(16):
        np.testing.assert_allclose(local[j], template.rest_vertices[idx], atol=1e-12)


def face_points(mesh, fid, bary, h):
    tri = mesh.triangles[fid]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return np.einsum("k,nkc->nc", bary, tri) + h * n


def test_uvh_field_is_invariant_to_global_motion(template, rng):
    # without pose input, a uvh field sees the same coordinates after a rigid move of the hand
    f, fx = make_field("uvh", pose_conditioning=False), make_field("xyz", pose_conditioning=False)
    a = make_context(template, HandParams())
    b = make_context(template, HandParams(R=[0.0, 0.4, 0.3], t=[0.02, 0.0, -0.01]))
    # dorsal palm faces move rigidly, so their nearest-surface coordinates are well defined
    tri = a.mesh.triangles
    up = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])[:, 2] > 0
    palm = template.skin_weights[a.mesh.faces].min(axis=1)[:, 0] > 0.999
    fid = rng.choice(np.flatnonzero(up & palm), 5, replace=False)
    bary = np.array([0.3, 0.3, 0.4])
    pa, pb = face_points(a.mesh, fid, bary, 0.002), face_points(b.mesh, fid, bary, 0.002)
    d = np.tile([0, 0, 1.0], (5, 1))
    sa, _, _ = f.evaluate(pa, d, a)
    sb, _, _ = f.evaluate(pb, d, b)
    np.testing.assert_allclose(sa.data, sb.data, rtol=1e-9)
    xa, _, _ = fx.evaluate(pa, d, a)
    xb, _, _ = fx.evaluate(pb, d, b)
    assert not np.allclose(xa.data, xb.data, rtol=1e-3)


def test_per_bone_needs_skin_weights(template):
    f = make_field("per_bone")
    with pytest.raises(ConfigError, match="skinning weights"):
        f.evaluate(np.zeros((1, 3)), np.ones((1, 3)), make_context(template, HandParams()))


def test_config_validation():
    with pytest.raises(ConfigError, match="variant"):
        FieldConfig(variant="mlp")
    with pytest.raises(ConfigError, match="width"):
        FieldConfig(width=0)
    with pytest.raises(ConfigError, match="unknown"):
        FieldConfig.from_dict({"variant": "uvh", "colour": 1})
    assert FieldConfig.from_dict(FieldConfig().to_dict()) == FieldConfig()


@pytest.mark.parametrize("cfg", [FieldConfig(), desk_config().field])
def test_uvh_has_fewer_parameters_than_per_bone(cfg):
    def count(variant):
        c = FieldConfig.from_dict({**cfg.to_dict(), "variant": variant})
        return RadianceField(c, ParamStore(), 16).num_params()
    assert count("uvh") < count("per_bone")
    assert count("xyz") == count("uvh")


@pytest.mark.parametrize("variant", ["uvh", "per_bone"])
def test_field_gradients(variant, rng):
    f = make_field(variant)
    n = 4
    pos = rng.uniform(-1, 1, (16, n, 3) if variant == "per_bone" else (n, 3))
    pos = f.encode_xyz(pos)
    cond = f._cond(rng.normal(size=(n, 3)), rng.normal(size=48))
    bw = rng.dirichlet(np.ones(16), size=n) if variant == "per_bone" else None
    params = [f.store[k] for k in f.store.names("field/")]

    def loss():
        s, c, feat = f.forward(pos, cond, bw)
        return T.add(T.add(T.sum(T.mul(s, 0.01)), T.sum(T.square(c))), T.sum(feat))

    assert grad_check(loss, params, eps=1e-6, max_entries=8) < 1e-5
