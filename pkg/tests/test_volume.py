import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvped.geometry import CameraModel, intrinsic_from_fov, project
from mvped.volume import (
    DecoderParams,
    FeatureVolume,
    FusedVolume,
    GridSpec,
    concat_projection,
    decode,
    fuse,
    fuse_alternative,
    fuse_softmax,
    lift_features,
    sigmoid,
    softmax_weights,
    voxel_center,
)


def down_camera(width=16, height=16, fov=90, height_m=5.0):
    """Camera above the origin looking straight down, image x along world x."""
    K = intrinsic_from_fov(width, height, fov)
    R = np.diag([1.0, -1.0, -1.0])
    return CameraModel(K, R, -R @ np.array([0.0, 0.0, height_m]), width, height)


def random_volumes(rng, n=3, C=4, dims=(3, 4, 2), p_vis=0.7):
    vols = []
    for _ in range(n):
        vis = rng.random(dims) < p_vis
        vals = rng.normal(size=(C,) + dims) * vis
        vols.append(FeatureVolume(vals, vis))
    return vols


def test_voxel_center_examples():
    g = GridSpec((0, 0, 0), 1.0, (2, 2, 2))
    np.testing.assert_array_equal(voxel_center(g, 0, 0, 0), [0.5, 0.5, 0.5])
    np.testing.assert_array_equal(voxel_center(g, 1, 0, 0), [1.5, 0.5, 0.5])
    g = GridSpec((-2, -2, 0), 0.5, (4, 4, 4))
    np.testing.assert_array_equal(voxel_center(g, 0, 0, 0), [-1.75, -1.75, 0.25])
    with pytest.raises(IndexError):
        voxel_center(g, 4, 0, 0)
    np.testing.assert_array_equal(g.centers()[1, 2, 3], voxel_center(g, 1, 2, 3))


def test_covering_grid():
    g = GridSpec.covering((0, 0, 8, 8))
    assert g.dims == (32, 32, 8)
    assert g.num_voxels == 8192
    g = GridSpec.covering((-1, 0, 2.1, 1), voxel_size=0.5, z_max=1.0)
    assert g.dims == (7, 2, 2)
    assert np.all(g.upper[:2] >= [2.1, 1])
    with pytest.raises(ValueError, match="budget"):
        GridSpec.covering((0, 0, 100, 100), voxel_size=0.05)


def test_stacked_voxels_share_features():
    cam = down_camera()
    g = GridSpec((-0.5, -0.5, 0), 1.0, (1, 1, 4))
    F = np.random.default_rng(0).normal(size=(16, 16, 5))
    vol = lift_features(cam, F, g)
    assert vol.visibility.all()
    col = vol.values[:, 0, 0, :]
    for z in range(1, 4):
        np.testing.assert_array_equal(col[:, z], col[:, 0])
    # the column sits on the optical axis: pixel corner (8, 8), sampled bilinearly
    np.testing.assert_allclose(col[:, 0], F[7:9, 7:9].mean(axis=(0, 1)))


def test_voxel_behind_camera_is_invisible():
    cam = down_camera(height_m=1.0)
    g = GridSpec((-0.5, -0.5, 2.0), 1.0, (1, 1, 1))
    vol = lift_features(cam, np.ones((16, 16, 3)), g)
    assert not vol.visibility.any()
    np.testing.assert_array_equal(vol.values, 0)


def test_constant_map():
    cam = down_camera()
    g = GridSpec((-6, -6, 0), 1.0, (12, 12, 2))
    vol = lift_features(cam, np.full((8, 8, 2), 0.7), g)
    assert vol.visibility.any() and not vol.visibility.all()
    np.testing.assert_allclose(vol.values[:, vol.visibility], 0.7)
    np.testing.assert_array_equal(vol.values[:, ~vol.visibility], 0)


def test_lifting_uses_feature_resolution():
    # feature pixel (i, j) covers image pixels [s*i, s*(i+1)) for downsample s
    cam = down_camera(width=16, height=16)
    g = GridSpec((-4, -4, 0), 0.5, (16, 16, 1))
    F = np.random.default_rng(1).normal(size=(4, 4, 1))
    vol = lift_features(cam, F, g)
    u, v, _, vis = (np.asarray(a) for a in zip(*[
        project(cam, c) for c in g.centers().reshape(-1, 3)
    ]))
    for k in np.flatnonzero(vis.astype(bool))[:50]:
        fu, fv = u[k] / 4 - 0.5, v[k] / 4 - 0.5
        # oracle: explicit clamped bilinear interpolation
        fu, fv = np.clip(fu, 0, 3), np.clip(fv, 0, 3)
        i0, j0 = min(int(fu), 2), min(int(fv), 2)
        a, b = fu - i0, fv - j0
        ref = ((1 - a) * (1 - b) * F[j0, i0] + a * (1 - b) * F[j0, i0 + 1]
               + (1 - a) * b * F[j0 + 1, i0] + a * b * F[j0 + 1, i0 + 1])
        np.testing.assert_allclose(vol.values[:, :, :, 0].reshape(1, -1)[:, k], ref, atol=1e-12)


def test_lifting_is_order_independent():
    cam = down_camera()
    g = GridSpec((-3, -3, 0), 0.5, (12, 12, 4))
    F = np.random.default_rng(2).normal(size=(16, 16, 3))
    a = lift_features(cam, F, g)
    b = lift_features(cam, F, g)
    np.testing.assert_array_equal(a.values, b.values)
    # voxel-by-voxel on a permuted visit order
    rng = np.random.default_rng(3)
    for ix, iy, iz in rng.permutation(np.argwhere(np.ones(g.dims)))[:40]:
        single = GridSpec(tuple(voxel_center(g, ix, iy, iz) - 0.25), 0.5, (1, 1, 1))
        np.testing.assert_array_equal(lift_features(cam, F, single).values[:, 0, 0, 0], a.values[:, ix, iy, iz])


def test_softmax_single_view_is_identity():
    rng = np.random.default_rng(4)
    (v,) = random_volumes(rng, n=1)
    f = fuse_softmax([v])
    np.testing.assert_allclose(f.values, v.values)
    np.testing.assert_array_equal(f.coverage, v.visibility.astype(int))


def test_softmax_equal_confidence_is_mean():
    a = np.zeros((2, 1, 1, 1))
    b = np.zeros((2, 1, 1, 1))
    a[:, 0, 0, 0] = (3.0, 4.0)
    b[:, 0, 0, 0] = (5.0, 0.0)
    vis = np.ones((1, 1, 1), bool)
    f = fuse_softmax([FeatureVolume(a, vis), FeatureVolume(b, vis)])
    np.testing.assert_allclose(f.values[:, 0, 0, 0], (4.0, 2.0))


def test_softmax_low_temperature_selects_max_confidence_view():
    rng = np.random.default_rng(5)
    vols = random_volumes(rng, n=4, p_vis=1.0)
    f = fuse_softmax(vols, temperature=1e-3)
    norms = np.stack([np.linalg.norm(v.values, axis=0) for v in vols])
    top = norms.argmax(axis=0)
    sorted_n = np.sort(norms, axis=0)
    clear = sorted_n[-1] - sorted_n[-2] > 0.05  # skip near-ties
    for idx in np.argwhere(clear):
        x, y, z = idx
        np.testing.assert_allclose(f.values[:, x, y, z], vols[top[x, y, z]].values[:, x, y, z], atol=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 20))
def test_softmax_weights_sum_to_one_on_covered_voxels(seed, tau):
    vols = random_volumes(np.random.default_rng(seed), n=3)
    w = softmax_weights(vols, tau)
    vis = np.stack([v.visibility for v in vols])
    covered = vis.any(axis=0)
    np.testing.assert_allclose(w.sum(axis=0)[covered], 1.0, atol=1e-6)
    assert np.all(w[~vis] == 0)
    f = fuse_softmax(vols, tau)
    np.testing.assert_array_equal(f.values[:, ~covered], 0)


def test_softmax_tends_to_add_at_high_temperature():
    vols = random_volumes(np.random.default_rng(6), n=3)
    hot = fuse_softmax(vols, temperature=1e6)
    add = fuse_alternative(vols, "add")
    assert np.abs(hot.values - add.values).max() < 1e-4


def test_add_examples():
    vis = np.ones((1, 1, 1), bool)
    one = FeatureVolume(np.full((2, 1, 1, 1), 1.0), vis)
    three = FeatureVolume(np.full((2, 1, 1, 1), 3.0), vis)
    np.testing.assert_allclose(fuse_alternative([one, three], "add").values, 2.0)
    np.testing.assert_allclose(fuse_alternative([one, one], "add").values, 1.0)


def test_add_ignores_invisible_views():
    vis = np.array([[[True, False]]])
    a = FeatureVolume(np.array([[[[2.0, 0.0]]]]), vis)
    b = FeatureVolume(np.array([[[[4.0, 0.0]]]]), np.ones((1, 1, 2), bool))
    f = fuse_alternative([a, b], "add")
    np.testing.assert_allclose(f.values[0, 0, 0], [3.0, 0.0])
    np.testing.assert_array_equal(f.coverage[0, 0], [2, 1])


def test_concat_projection_is_direct_matrix_application():
    rng = np.random.default_rng(7)
    vols = random_volumes(rng, n=3, C=4, p_vis=1.0)
    f = fuse_alternative(vols, "concat_project", seed=11)
    P = concat_projection(4, 3, seed=11)
    np.testing.assert_allclose(P @ P.T, np.eye(4), atol=1e-12)
    x, y, z = 1, 2, 1
    cat = np.concatenate([v.values[:, x, y, z] for v in vols])
    np.testing.assert_allclose(f.values[:, x, y, z], P @ cat, atol=1e-12)


def test_concat_projection_norms():
    P = concat_projection(5, 3, seed=2)
    rng = np.random.default_rng(8)
    for _ in range(100):
        # isometry on the row space
        y = rng.normal(size=5)
        assert abs(np.linalg.norm(P @ (P.T @ y)) - np.linalg.norm(y)) < 1e-6
        # contraction elsewhere
        x = rng.normal(size=15)
        assert np.linalg.norm(P @ x) <= np.linalg.norm(x) + 1e-12


def test_fusion_rejects_bad_input():
    rng = np.random.default_rng(9)
    a = random_volumes(rng, n=1, dims=(2, 2, 2))[0]
    b = random_volumes(rng, n=1, dims=(2, 2, 3))[0]
    with pytest.raises(ValueError, match="mismatched"):
        fuse([a, b])
    with pytest.raises(ValueError):
        fuse([])
    with pytest.raises(ValueError, match="unknown fusion"):
        fuse([a], mode="max")
    with pytest.raises(ValueError, match="temperature"):
        fuse([a], temperature=0.0)


GRID = GridSpec((0, 0, 0), 1.0, (2, 3, 2))


def full_coverage(C=3):
    return FusedVolume(np.zeros((C,) + GRID.dims), np.ones(GRID.dims, int))


def test_direct_decode_sigmoid_zero():
    s = decode(None, DecoderParams.direct(GRID.dims, 0.0, 0.0), GRID)
    np.testing.assert_array_equal(s.density, 0.5)
    np.testing.assert_array_equal(s.color, 0.5)


def test_linear_decode_negative_bias_gives_empty_scene():
    p = DecoderParams.linear(3, b_sigma=-20.0)
    p.w_sigma[:] = 0
    s = decode(full_coverage(), p, GRID)
    assert s.density.max() < 1e-8


def test_linear_decode_single_voxel():
    fused = full_coverage()
    fused.values[0, 1, 2, 0] = 2.0
    p = DecoderParams.linear(3)
    p.w_sigma[:] = (1.0, 0.0, 0.0)
    p.b_sigma = 0.0
    s = decode(fused, p, GRID)
    expected = np.full(GRID.dims, 0.5)
    expected[1, 2, 0] = 1 / (1 + np.exp(-2.0))
    np.testing.assert_allclose(s.density, expected, atol=1e-15)


def test_zero_coverage_voxels_have_no_density():
    fused = full_coverage()
    fused.coverage[0, 0, 0] = 0
    s = decode(fused, DecoderParams.direct(GRID.dims, 3.0), GRID)
    assert s.density[0, 0, 0] == 0
    assert s.density[1, 1, 1] > 0.9


def test_decode_shape_errors():
    with pytest.raises(ValueError):
        decode(None, DecoderParams.linear(3), GRID)
    with pytest.raises(ValueError):
        decode(full_coverage(4), DecoderParams.linear(3), GRID)
    with pytest.raises(ValueError):
        decode(full_coverage(), DecoderParams.direct((2, 2, 2)), GRID)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e3, 1e3), st.integers(0, 1000))
def test_decoded_scene_is_in_unit_range(scale, seed):
    rng = np.random.default_rng(seed)
    p = DecoderParams("direct", scale * rng.normal(size=GRID.dims), scale * rng.normal(size=(3,) + GRID.dims))
    s = decode(None, p, GRID)
    assert 0 <= s.density.min() and s.density.max() <= 1
    assert 0 <= s.color.min() and s.color.max() <= 1


def test_sigmoid_is_stable():
    x = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    with np.errstate(over="raise"):
        y = sigmoid(x)
    assert y[0] == 0.0 and y[-1] == 1.0 and y[2] == 0.5
    np.testing.assert_allclose(y[1] + y[3], 1.0)
