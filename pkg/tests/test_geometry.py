import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oddvox.diffcore import Tensor, default_dtype, linear
from oddvox.diffcore.gradcheck import check_gradients
from oddvox.errors import ConfigError, DimensionError, ValidationError
from oddvox.geometry import (
    ObjectBox3D,
    VoxelGridSpec,
    bilinear_sample,
    lift_features,
    project_point,
    reduce_channels,
    roi_pool,
    squeeze_crop,
)
from oddvox.scenegen import build_scene, look_at

from oracles import bilinear_oracle, lift_oracle, project_oracle, roi_max_oracle


def simple_P(fx=100.0, cx=32.0):
    K = np.array([[fx, 0, cx], [0, fx, cx], [0, 0, 1.0]])
    return K @ np.hstack([np.eye(3), np.zeros((3, 1))])


def random_camera(rng, size=8):
    eye = rng.normal(size=3)
    eye = eye / np.linalg.norm(eye) * rng.uniform(1.5, 3.0)
    eye[2] = abs(eye[2]) + 0.5
    R, t = look_at(eye, rng.normal(scale=0.1, size=3))
    f = rng.uniform(3.0, 10.0)
    K = np.array([[f, 0, size / 2], [0, f * rng.uniform(0.9, 1.1), size / 2], [0, 0, 1.0]])
    return K, R, t


# --- projection --------------------------------------------------------------


def test_principal_point():
    u, v, z, ok = project_point(simple_P(), np.array([0.0, 0.0, 1.0]))
    assert (u, v, z, ok) == (32.0, 32.0, 1.0, True)


def test_offset_point():
    u, v, z, ok = project_point(simple_P(), np.array([0.1, 0.0, 1.0]))
    assert u == pytest.approx(42.0) and v == pytest.approx(32.0) and ok


def test_behind_camera_flag():
    _, _, _, ok = project_point(simple_P(), np.array([0.0, 0.0, -1.0]))
    assert not ok


def test_projection_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        K, R, t = random_camera(rng)
        X = rng.normal(size=3)
        P = K @ np.hstack([R, t[:, None]])
        u, v, z, ok = project_point(P, X)
        ref = project_oracle(K, R, t, X)
        assert ok == (ref is not None)
        if ok:
            np.testing.assert_allclose([u, v, z], ref, atol=1e-6)


# --- bilinear sampling -------------------------------------------------------


def test_integer_sample_is_exact():
    rng = np.random.default_rng(1)
    fmap = rng.normal(size=(3, 5, 6))
    for i in range(5):
        for j in range(6):
            vals, ok = bilinear_sample(fmap, float(j), float(i))
            assert ok and np.array_equal(vals, fmap[:, i, j])


def test_centre_of_two_by_two_is_mean():
    fmap = np.arange(4.0).reshape(1, 2, 2)
    vals, ok = bilinear_sample(fmap, 0.5, 0.5)
    assert ok and vals[0] == pytest.approx(1.5)


def test_out_of_bounds_flag():
    _, ok = bilinear_sample(np.zeros((1, 4, 4)), -0.6, 0.0)
    assert not ok


def test_bilinear_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        h, w = rng.integers(1, 7, size=2)
        fmap = rng.normal(size=(2, h, w))
        x, y = rng.uniform(-1.0, w), rng.uniform(-1.0, h)
        vals, ok = bilinear_sample(fmap, x, y)
        ref = bilinear_oracle(fmap, x, y)
        assert ok == (ref is not None)
        if ok:
            np.testing.assert_allclose(vals, ref, atol=1e-12)


# --- lifting -----------------------------------------------------------------


def _lift_case(rng, n_views=2, d=3, size=8, dims=(8, 8, 2), stride=2.0):
    grid = VoxelGridSpec(dims, 0.1, (-0.4, -0.4, -0.1))
    views, oracle_views = [], []
    for _ in range(n_views):
        K, R, t = random_camera(rng, size)
        F = rng.normal(size=(d, int(size / stride), int(size / stride)))
        views.append((Tensor(F, dtype=np.float64), K @ np.hstack([R, t[:, None]])))
        oracle_views.append((F, (K, R, t)))
    return grid, views, oracle_views


def test_lift_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(100):
        stride = float(rng.choice([1.0, 2.0]))
        grid, views, oviews = _lift_case(rng, n_views=int(rng.integers(1, 4)), stride=stride)
        vol = lift_features(views, grid, stride=stride)
        ref, count = lift_oracle(oviews, grid.dims, grid.voxel_size, grid.origin, stride)
        np.testing.assert_allclose(vol.data.data, ref, atol=1e-6)
        assert np.array_equal(vol.valid_count, count)


def test_single_view_equals_samples():
    rng = np.random.default_rng(4)
    grid, views, oviews = _lift_case(rng, n_views=1, stride=1.0)
    vol = lift_features(views, grid, stride=1.0)
    F, (K, R, t) = oviews[0]
    P = views[0][1]
    centres = grid.centers().reshape(-1, 3)
    u, v, _, front = project_point(P, centres)
    samples, ok = bilinear_sample(F, u - 0.5, v - 0.5)
    ok &= front
    np.testing.assert_allclose(vol.data.data.reshape(3, -1)[:, ok], samples[:, ok], atol=1e-12)


def test_duplicate_views_equal_single_view():
    rng = np.random.default_rng(5)
    grid, views, _ = _lift_case(rng, n_views=1)
    one = lift_features(views, grid, stride=2.0)
    two = lift_features(views * 2, grid, stride=2.0)
    np.testing.assert_allclose(two.data.data, one.data.data, atol=1e-12)
    assert np.array_equal(two.valid_count, 2 * one.valid_count)


def test_unseen_voxels_are_zero():
    rng = np.random.default_rng(6)
    grid, views, _ = _lift_case(rng, n_views=1)
    vol = lift_features(views, grid, stride=2.0)
    assert np.all(vol.data.data[:, vol.valid_count == 0] == 0)


def test_channel_mismatch_rejected():
    rng = np.random.default_rng(7)
    grid, views, _ = _lift_case(rng)
    views[1] = (Tensor(np.zeros((5, 4, 4))), views[1][1])
    with pytest.raises(ConfigError):
        lift_features(views, grid)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3.0, 3.0))
def test_lift_linearity(seed, alpha):
    rng = np.random.default_rng(seed)
    grid, views, _ = _lift_case(rng)
    base = lift_features(views, grid, stride=2.0)
    scaled = lift_features([(Tensor(F.data * alpha, dtype=np.float64), P) for F, P in views], grid, stride=2.0)
    np.testing.assert_allclose(scaled.data.data, alpha * base.data.data, atol=1e-9)
    assert np.array_equal(scaled.valid_count, base.valid_count)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.permutations(range(4)))
def test_view_permutation_bit_identical(seed, perm):
    rng = np.random.default_rng(seed)
    grid, views, _ = _lift_case(rng, n_views=4)
    a = lift_features(views, grid, stride=2.0)
    b = lift_features([views[i] for i in perm], grid, stride=2.0)
    assert np.array_equal(a.data.data, b.data.data)


def test_lift_gradient():
    rng = np.random.default_rng(8)
    with default_dtype(np.float64):
        grid, views, _ = _lift_case(rng, n_views=2, d=2)
        Fs = [Tensor(F.data, requires_grad=True) for F, _ in views]
        w = rng.normal(size=(2,) + grid.dims)

        def loss():
            vol = lift_features([(F, P) for F, (_, P) in zip(Fs, views)], grid, stride=2.0)
            return (vol.data * Tensor(w)).sum()

        errs = check_gradients(loss, {"F0": Fs[0], "F1": Fs[1]})
    assert max(errs.values()) < 1e-6


def test_surface_voxels_project_to_rendered_depth():
    scene = build_scene(3, 0)
    grid = VoxelGridSpec()
    for view in scene.views:
        cam = view.camera
        depth = view.depth
        H, W = depth.shape
        pad = np.pad(depth, 1, mode="edge")
        nb = np.stack([pad[i : i + H, j : j + W] for i in range(3) for j in range(3)])
        smooth = (depth > 0) & np.all(nb > 0, axis=0) & (np.ptp(nb, axis=0) < grid.voxel_size)
        rows, cols = np.nonzero(smooth)
        assert len(rows) > 0
        rays = np.stack([(cols + 0.5 - cam.cx) / cam.fx, (rows + 0.5 - cam.cy) / cam.fy, np.ones(len(rows))], 1)
        world = (rays * depth[rows, cols][:, None] - cam.t) @ cam.R
        idx = np.floor((world - np.asarray(grid.origin)) / grid.voxel_size)
        centre = np.asarray(grid.origin) + (idx + 0.5) * grid.voxel_size
        u, v, z, _ = project_point(cam.P, centre)
        r = np.clip(np.floor(v).astype(int), 0, H - 1)
        c = np.clip(np.floor(u).astype(int), 0, W - 1)
        seen = depth[r, c] > 0
        assert np.all(np.abs(z[seen] - depth[r, c][seen]) < 2 * grid.voxel_size)


# --- reduce_channels ---------------------------------------------------------


def test_selector_weight_keeps_first_channels():
    rng = np.random.default_rng(9)
    F = rng.normal(size=(40, 3, 4))
    W = np.eye(32, 40)
    out = reduce_channels(Tensor(F, dtype=np.float64), Tensor(W, dtype=np.float64))
    np.testing.assert_array_equal(out.data, F[:32])


def test_zero_weight_gives_zero_map():
    out = reduce_channels(Tensor(np.ones((8, 2, 2))), Tensor(np.zeros((32, 8))))
    assert out.shape == (32, 2, 2) and np.all(out.data == 0)


def test_single_pixel_equals_linear():
    rng = np.random.default_rng(10)
    F, W, b = rng.normal(size=(16, 1, 1)), rng.normal(size=(32, 16)), rng.normal(size=32)
    with default_dtype(np.float64):
        out = reduce_channels(Tensor(F), Tensor(W), Tensor(b))
        ref = linear(Tensor(F[:, 0, 0][None]), Tensor(W), Tensor(b))
    np.testing.assert_allclose(out.data[:, 0, 0], ref.data[0], atol=1e-12)


def test_reduce_channel_mismatch():
    with pytest.raises(DimensionError):
        reduce_channels(Tensor(np.ones((8, 2, 2))), Tensor(np.zeros((32, 9))))


# --- roi pooling -------------------------------------------------------------


def _grid(dims=(16, 16, 16)):
    return VoxelGridSpec(dims, 0.5, (0.0, 0.0, 0.0))


def test_constant_volume_constant_crop():
    grid = _grid()
    vol = Tensor(np.full((2,) + grid.dims, 3.5))
    out = roi_pool(vol, ObjectBox3D((1.1, 2.3, 0.2), (4.9, 3.1, 6.0)), grid)
    assert out.shape == (2, 8, 8, 8) and np.all(out.data == 3.5)


def test_aligned_box_is_verbatim_crop():
    grid = _grid()
    rng = np.random.default_rng(11)
    vol = rng.normal(size=(2,) + grid.dims)
    box = ObjectBox3D((1.0, 2.0, 3.0), (5.0, 6.0, 7.0))  # voxels 2..9, 4..11, 6..13
    out = roi_pool(Tensor(vol, dtype=np.float64), box, grid)
    np.testing.assert_array_equal(out.data, vol[:, 2:10, 4:12, 6:14])


def test_roi_matches_brute_force():
    rng = np.random.default_rng(12)
    grid = _grid()
    for _ in range(100):
        vol = rng.normal(size=(2,) + grid.dims)
        lo = rng.uniform(-0.2, 7.5, size=3)
        hi = lo + rng.uniform(0.3, 8.0, size=3)
        out = roi_pool(Tensor(vol, dtype=np.float64), ObjectBox3D(lo, hi), grid)
        ref = roi_max_oracle(vol, lo, hi, grid.origin, grid.voxel_size)
        np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_box_spanning_sixteen_voxels():
    rng = np.random.default_rng(13)
    grid = _grid()
    vol = rng.normal(size=(1,) + grid.dims)
    out = roi_pool(Tensor(vol, dtype=np.float64), ObjectBox3D((0, 0, 0), (8, 8, 8)), grid)
    ref = vol.reshape(1, 8, 2, 8, 2, 8, 2).max(axis=(2, 4, 6))
    np.testing.assert_array_equal(out.data, ref)


def test_box_outside_grid_rejected():
    with pytest.raises(ValidationError, match="outside"):
        roi_pool(Tensor(np.zeros((1, 16, 16, 16))), ObjectBox3D((20, 0, 0), (21, 1, 1)), _grid())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.tuples(st.integers(-3, 3), st.integers(-3, 3), st.integers(-3, 3)))
def test_roi_translation_equivariance(seed, shift):
    rng = np.random.default_rng(seed)
    grid = _grid((24, 24, 24))
    vol = rng.normal(size=(1,) + grid.dims)
    lo = rng.uniform(3.3, 5.7, size=3)  # stays inside after shifting by up to 3 voxels
    hi = lo + rng.uniform(0.7, 3.9, size=3)
    moved = np.roll(vol, shift, axis=(1, 2, 3))
    off = np.asarray(shift) * grid.voxel_size
    a = roi_pool(Tensor(vol, dtype=np.float64), ObjectBox3D(lo, hi), grid)
    b = roi_pool(Tensor(moved, dtype=np.float64), ObjectBox3D(lo + off, hi + off), grid)
    np.testing.assert_array_equal(a.data, b.data)


@pytest.mark.parametrize("mode", ["max", "mean"])
def test_roi_gradient(mode):
    rng = np.random.default_rng(14)
    grid = VoxelGridSpec((6, 5, 4), 1.0, (0, 0, 0))
    with default_dtype(np.float64):
        vol = Tensor(rng.normal(size=(2, 6, 5, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, 3, 3)))
        box = ObjectBox3D((0.3, 0.2, 0.1), (5.7, 4.6, 3.9))
        errs = check_gradients(lambda: (roi_pool(vol, box, grid, out=(3, 3, 3), mode=mode) * w).sum(), {"v": vol})
    assert errs["v"] < 1e-6


def test_roi_mean_mode_matches_bin_means():
    rng = np.random.default_rng(15)
    grid = _grid()
    vol = rng.normal(size=(1,) + grid.dims)
    out = roi_pool(Tensor(vol, dtype=np.float64), ObjectBox3D((0, 0, 0), (8, 8, 8)), grid, mode="mean")
    ref = vol.reshape(1, 8, 2, 8, 2, 8, 2).mean(axis=(2, 4, 6))
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


# --- squeeze -----------------------------------------------------------------


def test_squeeze_constant():
    out = squeeze_crop(Tensor(np.full((4, 8, 8, 8), 2.5)))
    np.testing.assert_allclose(out.data, 2.5)


def test_squeeze_single_hot_cell():
    crop = np.zeros((3, 8, 8, 8))
    crop[:, 1, 2, 3] = 512.0
    np.testing.assert_allclose(squeeze_crop(Tensor(crop)).data, 1.0)


def test_squeeze_gradient_is_uniform():
    crop = Tensor(np.zeros((2, 8, 8, 8)), requires_grad=True, dtype=np.float64)
    squeeze_crop(crop).sum().backward()
    np.testing.assert_allclose(crop.grad, 1 / 512)
