import json

import numpy as np
import pytest
from PIL import Image

from handfield.dataset import DatasetError, load_dataset, save_dataset
from handfield.hand_model import HandParams, skin
from handfield.render import generate_rays
from handfield.synth import (
    DARK, SKIN, SceneRecipe, albedo, camera_rig, crease_factor, curl_pose, generate_dataset, oracle_shade,
    quantize, render_truth, sample_poses,
)


def ray_hits(origins, dirs, tris):
    """Moller-Trumbore: does each ray hit any triangle in front of its origin."""
    e1, e2 = tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]
    hit = np.zeros(len(origins), dtype=bool)
    for r, (o, d) in enumerate(zip(origins, dirs)):
        p = np.cross(d, e2)
        det = (e1 * p).sum(1)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1 / np.where(ok, det, 1), 0)
        s = o - tris[:, 0]
        u = (s * p).sum(1) * inv
        q = np.cross(s, e1)
        v = (q @ d) * inv
        t = (q * e2).sum(1) * inv
        hit[r] = np.any(ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0))
    return hit


def test_same_seed_same_dataset(tiny_recipe, tiny_dataset, template):
    again = generate_dataset(tiny_recipe, template)
    for a, b in zip(tiny_dataset.frames, again.frames):
        assert np.array_equal(a.params.to_vector(), b.params.to_vector())
        for x, y in zip(a.images + a.masks, b.images + b.masks):
            assert np.array_equal(x, y)
    other = sample_poses(SceneRecipe(**{**tiny_recipe.to_dict(), "seed": 1}))
    assert not np.allclose(other[0].theta, tiny_dataset.frames[0].params.theta)


def test_splits_and_shapes(tiny_dataset, tiny_recipe):
    tiny_dataset.validate()
    assert tiny_dataset.indices("train") == [0, 1] and tiny_dataset.indices("heldout") == [2]
    assert tiny_dataset.resolution == (tiny_recipe.width, tiny_recipe.height)


def test_albedo_examples():
    np.testing.assert_allclose(albedo([0.6, 0.6]), SKIN)
    np.testing.assert_allclose(albedo([0.6, 0.7]), (SKIN + DARK) / 2)
    grid = np.stack(np.meshgrid(np.linspace(0, 1, 101), np.linspace(0, 1, 101)), axis=-1)
    assert albedo(grid).max() <= 0.7


def test_shading_limits():
    rc = SceneRecipe()
    uv, flat = np.array([0.6, 0.6]), np.zeros(45)
    np.testing.assert_allclose(oracle_shade(uv, rc.light, flat), SKIN)
    grazing = np.cross(rc.light, [1.0, 0, 0])
    np.testing.assert_allclose(oracle_shade(uv, grazing, flat), rc.ambient * SKIN, atol=1e-15)
    np.testing.assert_allclose(oracle_shade(uv, -rc.light, flat), rc.ambient * SKIN, atol=1e-15)


def test_crease_only_darkens_bent_finger(template, tiny_recipe):
    rng = np.random.default_rng(0)
    uv = rng.uniform(0, 1, (4000, 2))
    assert np.all(crease_factor(uv, np.zeros(45)) == 1.0)
    theta = curl_pose([0, 1.0, 0, 0, 0]).theta
    c = crease_factor(uv, theta)
    assert np.all((c > 0) & (c <= 1)) and c.min() < 0.8
    # a bent finger leaves the same crease pattern no matter how the hand is rotated
    np.testing.assert_array_equal(c, crease_factor(uv, curl_pose([0, 1.0, 0, 0, 0], R=[0.3, 0, 0]).theta))


def test_silhouette_matches_ray_casting(template):
    rc = SceneRecipe(n_cameras=2, width=32, height=24, focal=42.5, perturbations=[], supersample=1)
    cam = camera_rig(rc)[1]
    params = curl_pose([0.3, 0.6, 0.2, 0.5, 0.9], R=[0.1, -0.2, 0.1])
    mesh = skin(template, params)
    _, mask = render_truth(mesh, params, cam, rc)
    o, d = generate_rays(cam)
    want = ray_hits(o, d, mesh.triangles).reshape(mask.shape)
    assert want.sum() > 40
    assert np.mean(mask == want) > 0.99


def test_rig_cameras_look_at_target():
    rc = SceneRecipe()
    for cam in camera_rig(rc):
        np.testing.assert_allclose(cam.project(np.array(rc.target)), [[rc.width / 2, rc.height / 2]], atol=1e-9)
        assert np.linalg.norm(cam.center - rc.target) == pytest.approx(rc.radius)
        # all on the dorsal cap within the cap angle
        up = (cam.center - rc.target)[2] / rc.radius
        assert up >= np.cos(np.deg2rad(rc.cap_angle_deg)) - 1e-12


def test_perturbed_camera_is_affine_then_quantized(tiny_dataset, tiny_recipe, template):
    fr = tiny_dataset.frames[0]
    cam = tiny_dataset.cameras[1]
    clean, _ = render_truth(skin(template, fr.params), fr.params, cam, tiny_recipe)
    np.testing.assert_array_equal(fr.images[1], quantize(clean * 1.3 + 0.05))
    clean0, _ = render_truth(skin(template, fr.params), fr.params, tiny_dataset.cameras[0], tiny_recipe)
    np.testing.assert_array_equal(fr.images[0], quantize(clean0))


def test_recipe_validation():
    with pytest.raises(Exception, match="out of range"):
        SceneRecipe(n_cameras=2)
    with pytest.raises(Exception, match="unknown recipe"):
        SceneRecipe.from_dict({"n_frames": 3})
    rc = SceneRecipe()
    assert SceneRecipe.from_dict(json.loads(json.dumps(rc.to_dict()))) == rc


def test_dataset_round_trip(tiny_dataset, tmp_path):
    save_dataset(tiny_dataset, tmp_path)
    back = load_dataset(tmp_path)
    assert [c.to_dict() for c in back.cameras] == [c.to_dict() for c in tiny_dataset.cameras]
    assert back.recipe == tiny_dataset.recipe
    for a, b in zip(tiny_dataset.frames, back.frames):
        assert a.split == b.split
        np.testing.assert_array_equal(a.params.to_vector(), b.params.to_vector())
        for x, y in zip(a.images, b.images):
            np.testing.assert_array_equal(x, y)  # already 8-bit quantized
        for x, y in zip(a.masks, b.masks):
            np.testing.assert_array_equal(x, y)


def test_dataset_load_errors(tiny_dataset, tmp_path):
    with pytest.raises(DatasetError, match="cameras.json"):
        load_dataset(tmp_path)
    save_dataset(tiny_dataset, tmp_path)
    m = tmp_path / "frames" / "0000" / "mask0.png"
    Image.fromarray(np.full((24, 32), 7, dtype=np.uint8)).save(m)
    with pytest.raises(DatasetError, match="not binary"):
        load_dataset(tmp_path)
    m.unlink()
    with pytest.raises(DatasetError, match="missing mask0.png"):
        load_dataset(tmp_path)


def test_pose_sampler_is_hand_params(tiny_recipe):
    poses = sample_poses(tiny_recipe)
    assert len(poses) == 3 and all(isinstance(p, HandParams) for p in poses)
    assert all(np.all(p.t == 0) for p in poses)
