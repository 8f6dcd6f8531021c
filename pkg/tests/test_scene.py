import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerwise.errors import ConfigError, DegenerateViewError
from layerwise.scene import (
    AABB,
    Camera,
    CameraDistribution,
    LayerSpec,
    default_scene,
    derive_prompts,
    load_scene,
    orbit_camera,
    parse_scene,
    project_skeleton,
    sample_camera,
)


def test_default_scene_round_trips(scene_doc):
    sc = load_scene(json.dumps(scene_doc))
    assert [l.name for l in sc.layers] == ["body", "jeans", "shirt"]
    assert len(sc.joints) == 18
    assert sc.to_dict() == scene_doc
    assert sc.hash() == default_scene().hash()


def test_two_layer_document(scene_doc):
    scene_doc["layers"] = scene_doc["layers"][:2]
    sc = parse_scene(scene_doc)
    assert len(sc.layers) == 2


def test_inverted_cloth_box_names_layer(scene_doc):
    box = scene_doc["layers"][1]["aabb"]
    box["min"][0], box["max"][0] = 0.3, -0.3
    with pytest.raises(ConfigError) as err:
        parse_scene(scene_doc)
    assert "layers[1]" in str(err.value)


@pytest.mark.parametrize("key", ["skeleton", "bones", "layers", "base_prompt", "seed"])
def test_missing_required_key(scene_doc, key):
    del scene_doc[key]
    with pytest.raises(ConfigError) as err:
        parse_scene(scene_doc)
    assert key in str(err.value)


def test_unknown_key_rejected(scene_doc):
    scene_doc["extra"] = 1
    with pytest.raises(ConfigError):
        parse_scene(scene_doc)


def test_malformed_json():
    with pytest.raises(ConfigError):
        load_scene("{not json")


def test_detached_garment_rejected(scene_doc):
    scene_doc["layers"][1]["aabb"] = {"min": [0.8, 0.8, 0.8], "max": [0.9, 0.9, 0.9]}
    with pytest.raises(ConfigError, match="does not touch the body"):
        parse_scene(scene_doc)


def test_bad_bone_index(scene_doc):
    scene_doc["bones"].append([0, 99])
    with pytest.raises(ConfigError, match="bones"):
        parse_scene(scene_doc)


def test_joint_outside_scene_box(scene_doc):
    scene_doc["skeleton"][0]["pos"] = [0.0, 1.5, 0.0]
    with pytest.raises(ConfigError, match="skeleton"):
        parse_scene(scene_doc)


def test_empty_layer_list(scene_doc):
    scene_doc["layers"] = []
    with pytest.raises(ConfigError, match="layers"):
        parse_scene(scene_doc)


def test_prompt_templates():
    sc = default_scene()
    prompts = derive_prompts(sc.base_prompt, sc.layers)
    assert prompts.body == "a man only wearing underwear"
    assert prompts.cloth_only["jeans"] == "a pair of jeans"
    assert prompts.composed["jeans"] == "a man only wearing jeans"
    assert prompts.cloth_only["shirt"] == "a piece of denim shirt"
    assert derive_prompts(sc.base_prompt, sc.layers) == prompts


def test_prompts_without_garments():
    sc = default_scene()
    prompts = derive_prompts(sc.base_prompt, sc.layers[:1])
    assert prompts.body == "a man only wearing underwear"
    assert prompts.composed == {} and prompts.cloth_only == {}


def test_collapsed_camera_ranges():
    dist = CameraDistribution((0.0, 0.0), (0.0, 0.0), (2.5, 2.5))
    cam = sample_camera(dist, (32, 32), np.random.default_rng(42))
    np.testing.assert_allclose(cam.position, [0.0, 0.0, 2.5], atol=1e-12)
    np.testing.assert_allclose(cam.rotation[2], [0.0, 0.0, -1.0], atol=1e-12)


def test_camera_sampling_deterministic():
    dist = CameraDistribution()
    a = sample_camera(dist, (16, 16), np.random.default_rng(7))
    b = sample_camera(dist, (16, 16), np.random.default_rng(7))
    np.testing.assert_array_equal(a.position, b.position)
    np.testing.assert_array_equal(a.rotation, b.rotation)


def test_azimuth_histogram_is_uniform():
    dist = CameraDistribution()
    rng = np.random.default_rng(0)
    az = []
    for _ in range(10_000):
        p = sample_camera(dist, (4, 4), rng).position
        az.append(math.degrees(math.atan2(p[0], p[2])) % 360.0)
    counts, _ = np.histogram(az, bins=12, range=(0, 360))
    expected = len(az) / 12
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 11 degrees of freedom: the 0.999 quantile is 31.26
    assert chi2 < 31.26


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sampled_radius_in_range(seed):
    dist = CameraDistribution()
    cam = sample_camera(dist, (4, 4), np.random.default_rng(seed))
    r = np.linalg.norm(cam.position - np.asarray(dist.look_at))
    assert dist.radius_range[0] - 1e-9 <= r <= dist.radius_range[1] + 1e-9


def test_rotation_must_be_orthonormal():
    with pytest.raises(ValueError):
        Camera(np.zeros(3), np.diag([1.0, 2.0, 1.0]), 50.0, (4, 4))


def test_joint_at_look_at_projects_to_center():
    cam = orbit_camera(0.0, 0.0, 2.5, (64, 48))
    uv, z = cam.project(np.zeros((1, 3)))
    np.testing.assert_allclose(uv[0], [32.0, 24.0], atol=1e-9)
    assert z[0] == pytest.approx(2.5)


def test_pinhole_projection_by_hand():
    cam = orbit_camera(0.0, 0.0, 2.5, (64, 64), fov_y=60.0)
    x = np.array([[0.3, -0.2, 0.5]])
    # camera on +z looking toward -z: right = +x world, down = -y world
    f = 32.0 / math.tan(math.radians(30.0))
    depth = 2.5 - 0.5
    u = f * 0.3 / depth + 32.0
    v = f * (0.2) / depth + 32.0
    uv, _ = cam.project(x)
    assert abs(uv[0, 0] - u) < 0.5 and abs(uv[0, 1] - v) < 0.5
    np.testing.assert_allclose(uv[0], [u, v], atol=1e-9)


def test_skeleton_image_ranges():
    sc = default_scene()
    cam = orbit_camera(30.0, 10.0, 2.5, (64, 64))
    img = project_skeleton(sc.joints, sc.bones, cam).pixels
    assert img.shape == (64, 64, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert (img.sum(-1) == 0).mean() > 0.5
    assert img.max() > 0.5


def test_skeleton_pixel_on_bone():
    cam = orbit_camera(0.0, 0.0, 2.5, (64, 64))
    joints = np.array([[0.0, 0.4, 0.0], [0.0, -0.4, 0.0]])
    img = project_skeleton(joints, [(0, 1)], cam).pixels
    assert img[32, 31].max() > 0.0  # the bone projects onto the vertical centerline
    assert img[32, 5].max() == 0.0


def test_all_joints_behind_camera():
    sc = default_scene()
    cam = orbit_camera(0.0, 0.0, 2.5, (32, 32))
    flipped = Camera(cam.position, np.diag([-1.0, 1.0, -1.0]) @ cam.rotation, cam.fov_y, cam.resolution)
    with pytest.raises(DegenerateViewError):
        project_skeleton(sc.joints, sc.bones, flipped)


@settings(max_examples=25, deadline=None)
@given(st.floats(-180.0, 180.0))
def test_roll_rotates_projection(theta):
    sc = default_scene()
    cam = orbit_camera(20.0, 5.0, 2.6, (64, 64))
    uv0, _ = cam.project(sc.joints)
    uv1, _ = cam.rolled(theta).project(sc.joints)
    a = math.radians(-theta)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    expected = (uv0 - 32.0) @ rot.T + 32.0
    assert np.abs(uv1 - expected).max() < 0.5


def test_aabb_closed_boundary():
    box = AABB((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    assert box.contains(np.array([[1.0, 0.0, 0.5]])).all()
    assert not box.contains(np.array([[1.0 + 1e-9, 0.0, 0.5]])).any()
    assert LayerSpec("body", "", box).is_body
