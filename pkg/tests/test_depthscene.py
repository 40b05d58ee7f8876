import numpy as np
import pytest
from scipy.stats import binomtest

from sim_data.depthscene import (
    DEPTH_FLOOR, Box, Camera, Cylinder, DomainModel, Plane, RobotState, Scene, SceneConfig, Vec3,
    apply_domain, depth_edges, footprints_intersect, missing_fraction, render_depth, sample_scene,
    save_pgm, shift_columns,
)
from utils.errors import SceneSamplingError


def overhead_camera(height):
    return Camera(offset=Vec3(0.0, 0.0, height), pitch=0.0, mount="world")


def table_only_scene():
    # A tiny bottle far outside the view keeps the scene valid
    bottle = Cylinder(Vec3(5.0, 5.0, 0.0), 0.01, 0.1)
    return Scene(bottle, bottle.top_center(), clutter=(), with_clutter=False)


def test_table_only_scene_renders_constant_depth():
    image = render_depth(table_only_scene(), RobotState(Vec3(0, 0, 0.3)), overhead_camera(0.4))
    assert image.shape == (64, 64)
    np.testing.assert_allclose(image, 0.4, rtol=0, atol=1e-12)


def test_cylinder_under_camera_is_closer_by_its_height():
    bottle = Cylinder(Vec3(0.0, 0.0, 0.0), 0.05, 0.15)
    scene = Scene(bottle, bottle.top_center(), with_clutter=False)
    image = render_depth(scene, RobotState(Vec3(0, 0, 0.3)), overhead_camera(0.4))
    assert image[31, 31] == pytest.approx(0.4 - 0.15, abs=1e-12)
    assert image[0, 0] == pytest.approx(0.4, abs=1e-12)


def test_box_top_face_depth():
    box = Box(Vec3(0.0, 0.0, 0.05), Vec3(0.1, 0.1, 0.05))
    bottle = Cylinder(Vec3(5.0, 5.0, 0.0), 0.01, 0.1)
    scene = Scene(bottle, bottle.top_center(), clutter=(box,))
    image = render_depth(scene, RobotState(Vec3(0, 0, 0.3)), overhead_camera(0.4))
    assert image[32, 32] == pytest.approx(0.3, abs=1e-12)


def test_box_seen_from_inside_hits_its_inner_faces():
    box = Box(Vec3(0.0, 0.0, 0.1), Vec3(0.05, 0.02, 0.1))
    dirs = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]])
    t = box.intersect(np.array([0.0, 0.0, 0.1]), dirs)
    np.testing.assert_allclose(t, [0.05, 0.02, 0.1], rtol=1e-12)
    # From outside only the near face counts, and boxes behind the origin are missed
    t = box.intersect(np.array([-0.2, 0.0, 0.1]), dirs[:1])
    assert t[0] == pytest.approx(0.15, rel=1e-12)
    assert np.isinf(box.intersect(np.array([0.2, 0.0, 0.1]), dirs[:1])[0])


def test_plane_intersection_misses_rays_pointing_up():
    dirs = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    t = Plane(0.0).intersect(np.array([0.0, 0.0, 1.0]), dirs)
    assert t[0] == pytest.approx(1.0)
    assert np.isinf(t[1]) and np.isinf(t[2])


def test_render_is_pure():
    scene, state = sample_scene(SceneConfig(), np.random.default_rng(4))
    a = render_depth(scene, state, Camera())
    b = render_depth(scene, state, Camera())
    assert a.tobytes() == b.tobytes()


def test_wrist_camera_moves_with_the_hand():
    scene, state = sample_scene(SceneConfig(), np.random.default_rng(5))
    a = render_depth(scene, state, Camera())
    b = render_depth(scene, state.moved(0.02, 0.0), Camera())
    assert not np.array_equal(a, b)


def test_rendered_depths_are_bounded():
    camera = Camera()
    for seed in range(5):
        scene, state = sample_scene(SceneConfig(), np.random.default_rng(seed))
        image = render_depth(scene, state, camera)
        assert image.min() >= 0.0
        assert np.isfinite(image).all()
        # Farthest visible point is the table; bounded by the along-ray table distance
        height = camera.origin(state)[2] - scene.table.height
        cos_axis = np.cos(camera.pitch)
        assert image.max() <= height / cos_axis * 3.0


def test_zero_clutter_range_gives_empty_clutter():
    scene, _ = sample_scene(SceneConfig(clutter_count_range=(0, 0)), np.random.default_rng(0))
    assert scene.clutter == ()
    assert not scene.with_clutter


def test_same_seed_gives_same_scene():
    a = sample_scene(SceneConfig(), np.random.default_rng(9))
    b = sample_scene(SceneConfig(), np.random.default_rng(9))
    assert a == b


def test_clutter_count_in_range_and_not_touching_bottle():
    scene, state = sample_scene(SceneConfig(clutter_count_range=(3, 6)), np.random.default_rng(7))
    assert 3 <= len(scene.clutter) <= 6
    for obj in scene.clutter:
        assert not footprints_intersect(obj, scene.bottle)
    for i, a in enumerate(scene.clutter):
        for b in scene.clutter[i + 1:]:
            assert not footprints_intersect(a, b)


def test_scene_invariants_hold():
    config = SceneConfig()
    for seed in range(10):
        scene, state = sample_scene(config, np.random.default_rng(seed))
        bottle = scene.bottle
        assert scene.opening_position == bottle.top_center()
        assert bottle.center.z == scene.table.height
        offset = state.hand_position.as_array() - scene.opening_position.as_array()
        assert abs(offset[0]) <= config.init_half_width and abs(offset[1]) <= config.init_half_width
        assert config.init_height_min <= offset[2] <= config.init_height
        assert state.hand_position.z >= scene.table.height


def test_bottle_classes_set_the_category():
    config = SceneConfig(bottle_classes=(0.025, 0.045), class_jitter=0.001)
    for seed in range(6):
        scene, _ = sample_scene(config, np.random.default_rng(seed))
        assert scene.category in (0.025, 0.045)
        assert abs(scene.bottle.radius - scene.category) <= 0.001


def test_impossible_clutter_placement_names_the_constraint():
    config = SceneConfig(clutter_count_range=(5, 5), clutter_radius=0.0, max_attempts=3)
    with pytest.raises(SceneSamplingError, match="clutter"):
        sample_scene(config, np.random.default_rng(0))


def test_identity_domain_model_is_identity():
    scene, state = sample_scene(SceneConfig(), np.random.default_rng(1))
    image = render_depth(scene, state, Camera())
    rng = np.random.default_rng(0)
    out = apply_domain(image, DomainModel.identity(), rng)
    assert out.tobytes() == image.tobytes()
    # No random numbers drawn either
    assert rng.random() == np.random.default_rng(0).random()


def test_certain_dropout_zeroes_everything():
    image = np.full((64, 64), 0.3)
    out = apply_domain(image, DomainModel(missing_pixel_prob=1.0), np.random.default_rng(0))
    assert (out == 0).all()


def test_missing_pixel_rate_concentrates():
    images = np.full((100, 64, 64), 0.3)
    rng = np.random.default_rng(123)
    out = np.stack([apply_domain(im, DomainModel(missing_pixel_prob=0.10), rng) for im in images])
    rate = missing_fraction(out)
    assert 0.09 <= rate <= 0.11
    zeros = int((out == 0).sum())
    interval = binomtest(zeros, out.size, 0.10).proportion_ci(confidence_level=0.999)
    assert interval.low <= 0.10 <= interval.high


def test_target_model_output_is_nonnegative_with_floor():
    scene, state = sample_scene(SceneConfig(), np.random.default_rng(2))
    image = render_depth(scene, state, Camera())
    out = apply_domain(image, DomainModel(missing_pixel_prob=0.0, depth_bias=-10.0), np.random.default_rng(0))
    valid = image > 0
    assert (out[valid] == DEPTH_FLOOR).all()
    target = apply_domain(image, DomainModel.default_target(), np.random.default_rng(0))
    assert target.min() >= 0.0 and np.isfinite(target).all()


def test_shift_columns_replicates_the_edge():
    image = np.arange(12, dtype=float).reshape(3, 4)
    shifted = shift_columns(image, 1)
    np.testing.assert_array_equal(shifted[:, 0], image[:, 0])
    np.testing.assert_array_equal(shifted[:, 1:], image[:, :-1])
    np.testing.assert_array_equal(shift_columns(image, -1)[:, -1], image[:, -1])


def test_depth_edges_mark_both_sides_of_a_jump():
    image = np.full((4, 6), 0.5)
    image[:, 3:] = 0.3
    edges = depth_edges(image, threshold=0.02, width=1)
    assert edges[:, 2].all() and edges[:, 3].all()
    assert not edges[:, 0].any()


def test_save_pgm_writes_millimeters(tmp_path):
    image = np.full((64, 64), 0.25)
    path = tmp_path / "depth.pgm"
    save_pgm(image, path)
    data = path.read_bytes()
    header = b"P5\n64 64\n65535\n"
    assert data.startswith(header)
    pixels = np.frombuffer(data[len(header):], dtype=">u2")
    assert pixels.size == 64 * 64 and (pixels == 250).all()


@pytest.mark.parametrize("kwargs", [
    {"missing_pixel_prob": 1.5}, {"noise_std": -0.1}, {"quantization": -1.0},
])
def test_invalid_domain_model_is_rejected(kwargs):
    with pytest.raises(ValueError):
        DomainModel(**kwargs)


def test_camera_resolution_is_fixed():
    with pytest.raises(ValueError):
        Camera(resolution=32)
