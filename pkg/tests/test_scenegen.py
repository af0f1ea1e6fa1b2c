import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oddvox.errors import ConfigError, DatasetError, DatasetVersionError, ValidationError
from oddvox.geometry import project_point
from oddvox.scenegen import (
    AnomalyType,
    Camera,
    CameraConfig,
    PrimitiveShape,
    SceneConfig,
    build_scene,
    generate_scene,
    inject_anomaly,
    look_at,
    read_dataset,
    render_view,
    sample_cameras,
    sdf_eval,
    write_dataset,
)
from oddvox.scenegen.anomalies import surface_point
from oddvox.scenegen.scenes import Instance
from oddvox.scenegen.shapes import Child, monte_carlo_volume, random_shape
from oddvox.geometry import ObjectBox3D


def sphere(r=1.0, albedo=(0.8, 0.8, 0.8)):
    return PrimitiveShape("sphere", {"radius": r}, albedo)


# --- sdf_eval ----------------------------------------------------------------


def test_sphere_centre_is_minus_radius():
    assert sdf_eval(sphere(0.3), np.zeros(3)) == pytest.approx(-0.3)


def test_sphere_outside_point():
    assert sdf_eval(sphere(1.0), np.array([2.0, 0, 0])) == pytest.approx(1.0)


def test_box_corner_distance():
    box = PrimitiveShape("box", {"hx": 1.0, "hy": 1.0, "hz": 1.0})
    assert sdf_eval(box, np.array([2.0, 2.0, 2.0])) == pytest.approx(math.sqrt(3))


def test_composite_is_union_of_children():
    a, b = sphere(0.5), sphere(0.5)
    comp = PrimitiveShape("composite", {}, children=[Child(a, (-1.0, 0, 0)), Child(b, (1.0, 0, 0))])
    p = np.array([[0.0, 0, 0], [-1.0, 0, 0], [2.0, 0, 0]])
    expected = np.minimum(np.linalg.norm(p - [-1, 0, 0], axis=1), np.linalg.norm(p - [1, 0, 0], axis=1)) - 0.5
    np.testing.assert_allclose(sdf_eval(comp, p), expected)


def test_cut_is_subtraction():
    s = sphere(1.0)
    s.cuts.append({"kind": "halfspace", "normal": [1.0, 0, 0], "offset": 0.0})
    assert sdf_eval(s, np.array([0.5, 0, 0])) > 0  # removed side
    assert sdf_eval(s, np.array([-0.5, 0, 0])) < 0


@pytest.mark.parametrize("kind", ["sphere", "box", "cylinder", "capsule", "torus"])
def test_invalid_dimensions_rejected(kind):
    with pytest.raises(ValidationError):
        PrimitiveShape(kind, {})


def test_composite_child_count_checked():
    with pytest.raises(ValidationError):
        PrimitiveShape("composite", {}, children=[])


def _edited_shapes():
    rng = np.random.default_rng(7)
    shapes = []
    for kind in ["sphere", "box", "cylinder", "capsule", "torus", "composite"]:
        base = random_shape(rng, [kind])
        shapes.append(base)
        for t in ["bump", "fracture", "missing_part", "translation", "deformation"]:
            shapes.append(inject_anomaly(base, t, int(rng.integers(1000)))[0])
    return shapes


EDITED = _edited_shapes()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, len(EDITED) - 1), st.integers(0, 2**31))
def test_sdf_is_lipschitz(shape_idx, seed):
    rng = np.random.default_rng(seed)
    shape = EDITED[shape_idx]
    p = rng.uniform(-0.3, 0.3, size=(200, 3))
    q = p + rng.normal(scale=0.05, size=(200, 3))
    lhs = np.abs(sdf_eval(shape, p) - sdf_eval(shape, q))
    rhs = (1 + 1e-3) * np.linalg.norm(p - q, axis=1)
    assert np.all(lhs <= rhs + 1e-12)


# --- anomalies ---------------------------------------------------------------


def test_material_scales_albedo():
    out, params = inject_anomaly(sphere(0.1), "material", 0, ranges={"material_factor": (0.5, 0.5)})
    assert out.albedo == pytest.approx((0.4, 0.4, 0.4))
    assert params["factor"] == 0.5


@pytest.mark.parametrize("kind", ["material", "bump", "fracture", "missing_part", "translation", "deformation"])
def test_injection_is_deterministic(kind):
    base = random_shape(np.random.default_rng(3), ["composite"])
    a, pa = inject_anomaly(base, kind, 11)
    b, pb = inject_anomaly(base, kind, 11)
    assert a.to_dict() == b.to_dict() and pa == pb


def test_none_rejected():
    with pytest.raises(ValidationError):
        inject_anomaly(sphere(0.1), AnomalyType.NONE, 0)


@pytest.mark.parametrize("seed", range(6))
def test_fracture_removes_ten_to_twenty_five_percent(seed):
    base = random_shape(np.random.default_rng(seed), ["sphere", "box", "cylinder", "capsule", "torus", "composite"])
    cut, _ = inject_anomaly(base, "fracture", seed + 100)
    # independent Monte Carlo estimate with its own sample set
    v0 = monte_carlo_volume(base, n=100_000, seed=999)
    v1 = monte_carlo_volume(cut, n=100_000, seed=999)
    assert 0.10 <= 1 - v1 / v0 <= 0.25


def test_bump_sits_on_surface_and_scales_with_object():
    base = PrimitiveShape("box", {"hx": 0.1, "hy": 0.08, "hz": 0.06})
    out, params = inject_anomaly(base, "bump", 5)
    assert abs(float(sdf_eval(base, np.asarray(params["center"])))) < 1e-5
    assert 0.05 * 0.2 * 0.99 <= params["radius"] <= 0.15 * 0.2 * 1.2


def test_missing_part_removes_child_or_cuts_box():
    comp = random_shape(np.random.default_rng(1), ["composite"])
    if len(comp.children) >= 2:
        out, params = inject_anomaly(comp, "missing_part", 0)
        assert len(out.children) == len(comp.children) - 1
    single = PrimitiveShape("composite", {}, children=[Child(sphere(0.1))])
    out, params = inject_anomaly(single, "missing_part", 0)
    assert params["mode"] == "box" and len(out.cuts) == 1


def test_deformation_factor_range():
    factors = [inject_anomaly(sphere(0.1), "deformation", s)[1]["factor"] for s in range(200)]
    f = np.array(factors)
    assert np.all(((f >= 0.6) & (f <= 0.85)) | ((f >= 1.15) & (f <= 1.4)))


def test_translation_moves_one_child_by_fraction_of_extent():
    comps = (random_shape(np.random.default_rng(s), ["composite"]) for s in range(50))
    comp = next(c for c in comps if len(c.children) >= 2)
    out, params = inject_anomaly(comp, "translation", 2)
    moved = [i for i, (a, b) in enumerate(zip(comp.children, out.children)) if a.offset != b.offset]
    assert moved == [params["child"]]
    assert 0.1 <= params["fraction"] <= 0.3


# --- cameras -----------------------------------------------------------------


def test_single_camera_looks_at_centroid():
    cfg = CameraConfig(azimuth_jitter_deg=0.0)
    centre = np.array([0.1, -0.2, 0.15])
    (cam,) = sample_cameras(1, cfg, seed=0, center=centre)
    u, v, depth, front = project_point(cam.P, centre)
    assert front and abs(u - cam.cx) < 0.5 and abs(v - cam.cy) < 0.5
    d = cam.center - centre
    assert math.degrees(math.atan2(d[1], d[0])) == pytest.approx(0.0, abs=1e-9)


def test_even_azimuth_spacing_within_jitter():
    cfg = CameraConfig(azimuth_jitter_deg=5.0)
    cams = sample_cameras(4, cfg, seed=3)
    az = np.array([math.degrees(math.atan2(c.center[1], c.center[0])) for c in cams])
    deltas = np.mod(np.diff(az), 360.0)
    assert np.all(np.abs(deltas - 90.0) <= 2 * 5.0 + 1e-9)


def test_camera_rotation_valid():
    for cam in sample_cameras(5, seed=1):
        assert abs(np.linalg.det(cam.R) - 1) < 1e-6
        assert np.linalg.matrix_rank(cam.P) == 3


def test_camera_rejects_bad_rotation():
    with pytest.raises(ValidationError):
        Camera(50, 50, 32, 32, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 64, 64)


@pytest.mark.parametrize("seed", range(5))
def test_all_box_corners_inside_every_image(seed):
    spec = generate_scene(seed)
    for cam in spec.cameras:
        for box in spec.boxes:
            u, v, _, front = project_point(cam.P, box.corners())
            assert np.all(front)
            assert np.all((u >= 0) & (u <= cam.width) & (v >= 0) & (v <= cam.height))


# --- scene generation --------------------------------------------------------


def test_three_objects_one_anomaly():
    spec = generate_scene(0, SceneConfig(n_objects=(3, 3)))
    assert len(spec.instances) == 3 and sum(spec.labels) == 1


def test_generation_is_deterministic():
    a, b = generate_scene(42), generate_scene(42)
    assert a.to_dict() == b.to_dict()


def test_invariants_over_many_seeds():
    cfg = SceneConfig(n_objects=(5, 12), n_anomalies=(1, 2))
    for seed in range(25):
        spec = generate_scene(seed, cfg)
        n, k = len(spec.instances), sum(spec.labels)
        assert 3 <= n <= 12 and 1 <= k < n / 2
        assert len(spec.labels) == len(spec.boxes)
        for inst in spec.instances:
            assert inst.label == int(inst.anomaly is not AnomalyType.NONE)
        for i in range(n):
            for j in range(i + 1, n):
                assert not spec.boxes[i].overlaps(spec.boxes[j])


def test_anomaly_position_is_uniform():
    cfg = SceneConfig(n_objects=(4, 4), shape_kinds=("sphere",), anomaly_types=("material",))
    counts = np.zeros(4)
    for seed in range(1000):
        counts[generate_scene(seed, cfg).labels.index(1)] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_bad_anomaly_count_rejected():
    with pytest.raises(ConfigError):
        generate_scene(0, SceneConfig(n_objects=(3, 4), n_anomalies=(2, 2)))


def test_placement_failure_reports_bounds():
    from oddvox.errors import GenerationError

    cfg = SceneConfig(n_objects=(9, 9), cell_spacing=0.05)
    with pytest.raises(GenerationError, match="bounds"):
        generate_scene(0, cfg)


@pytest.mark.parametrize("seed", range(4))
def test_surface_samples_lie_inside_boxes(seed):
    spec = generate_scene(seed)
    rng = np.random.default_rng(seed)
    for inst in spec.instances:
        c, s = math.cos(inst.yaw), math.sin(inst.yaw)
        R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
        for _ in range(30):
            p_local = surface_point(inst.shape, rng, min_z=-1.0)
            p_world = R @ p_local + np.asarray(inst.position)
            assert inst.box.contains(p_world)


# --- rendering ---------------------------------------------------------------


class _Bare:
    def __init__(self, instances):
        self.instances = instances


def _posed(shape, pos):
    return Instance(pos, 0.0, AnomalyType.NONE, shape, ObjectBox3D((-1, -1, -1), (1, 1, 1)))


def _axis_camera(distance, size=64, f=60.0):
    R, t = look_at((0.0, -distance, 0.0), (0.0, 0.0, 0.0))
    return Camera(f, f, size / 2, size / 2, R, t, size, size)


def test_empty_scene_is_background():
    view = render_view(_Bare([]), _axis_camera(3.0))
    assert np.all(view.rgb == 0.15) and np.all(view.depth == 0)


def test_unit_sphere_depth_matches_ray_intersection():
    cam = _axis_camera(3.0)
    view = render_view(_Bare([_posed(sphere(1.0), (0.0, 0.0, 0.0))]), cam)
    i = j = 32
    # analytic ray-sphere hit for the ray through this pixel's centre
    d = np.array([(j + 0.5 - cam.cx) / cam.fx, (i + 0.5 - cam.cy) / cam.fy, 1.0])
    d_unit = d / np.linalg.norm(d)
    o = np.array([0.0, 0.0, 3.0])  # sphere centre in camera frame
    b = d_unit @ o
    t_hit = b - math.sqrt(b * b - (o @ o - 1.0))
    assert view.depth[i, j] == pytest.approx(t_hit * d_unit[2], abs=1e-3)
    assert view.depth[i, j] == pytest.approx(2.0, abs=1e-3)


def test_doubling_albedo_doubles_colour():
    cam = _axis_camera(3.0)
    dark = render_view(_Bare([_posed(sphere(1.0, (0.2, 0.3, 0.1)), (0, 0, 0))]), cam, clamp=False)
    bright = render_view(_Bare([_posed(sphere(1.0, (0.4, 0.6, 0.2)), (0, 0, 0))]), cam, clamp=False)
    hit = dark.depth > 0
    np.testing.assert_allclose(bright.rgb[hit], 2 * dark.rgb[hit], rtol=1e-12)


def test_render_deterministic_and_valid():
    scene = build_scene(5, 0)
    again = build_scene(5, 0)
    for a, b in zip(scene.views, again.views):
        assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth, b.depth)
        assert np.all(np.isfinite(a.rgb)) and a.rgb.min() >= 0 and a.rgb.max() <= 1
        assert a.depth.min() >= 0


# --- dataset I/O ---------------------------------------------------------------


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    scenes = [build_scene(1, i) for i in range(2)]
    write_dataset(scenes, root, SceneConfig())
    return root, scenes


def test_round_trip_metadata(small_dataset):
    root, scenes = small_dataset
    loaded = read_dataset(root)
    assert [s.name for s in loaded] == ["scene_0000", "scene_0001"]
    for a, b in zip(scenes, loaded):
        assert a.spec.to_dict() == b.spec.to_dict()


def test_round_trip_pixels(small_dataset):
    root, scenes = small_dataset
    for a, b in zip(scenes, read_dataset(root)):
        for va, vb in zip(a.views, b.views):
            assert np.abs(va.rgb - vb.rgb).max() <= 1 / 255


def test_json_numbers_plain_decimal(small_dataset):
    root, _ = small_dataset
    text = (root / "scene_0000" / "cameras.json").read_text()
    assert "e-" not in text and "e+" not in text
    cams = json.loads(text)
    assert set(cams[0]) == {"K", "R", "t", "W", "H"} and len(cams[0]["R"]) == 9


def test_tampered_version_rejected(tmp_path, small_dataset):
    root, scenes = small_dataset
    write_dataset(scenes[:1], tmp_path)
    meta = json.loads((tmp_path / "meta.json").read_text())
    meta["format"] = "oddvox-ds-v0"
    (tmp_path / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetVersionError):
        read_dataset(tmp_path)


def test_missing_and_corrupt_files(tmp_path, small_dataset):
    _, scenes = small_dataset
    with pytest.raises(DatasetError, match="does not exist"):
        read_dataset(tmp_path / "nope")
    write_dataset(scenes[:1], tmp_path)
    (tmp_path / "scene_0000" / "view_1.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError, match="corrupt image"):
        read_dataset(tmp_path)
    (tmp_path / "scene_0000" / "labels.json").unlink()
    with pytest.raises(DatasetError, match="missing"):
        read_dataset(tmp_path)
