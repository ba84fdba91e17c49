import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from mvped.geometry import (
    CameraModel,
    backproject,
    intrinsic_from_fov,
    pixel_rays,
    project,
    project_points,
    ray_through_pixel,
)


def random_camera(rng, width=640, height=480):
    R = Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()
    f = rng.uniform(200, 800)
    K = np.array([[f, rng.uniform(-1, 1), rng.uniform(200, 400)],
                  [0, f * rng.uniform(0.9, 1.1), rng.uniform(150, 300)],
                  [0, 0, 1]])
    return CameraModel(K, R, rng.normal(size=3) * 3, width, height)


def chain_oracle(camera, p):
    # explicit homogeneous chain K . [I|0] . [[R, t], [0, 1]] . (x, y, z, 1)
    psi = np.zeros((4, 4))
    psi[:3, :3] = camera.rotation
    psi[:3, 3] = camera.translation
    psi[3, 3] = 1
    pi0 = np.zeros((3, 4))
    pi0[0, 0] = pi0[1, 1] = pi0[2, 2] = 1
    h = camera.intrinsic @ pi0 @ psi @ np.append(p, 1.0)
    return h[0] / h[2], h[1] / h[2], h[2]


def test_identity_camera():
    cam = CameraModel(np.eye(3), np.eye(3), np.zeros(3), 1, 1)
    pr = project(cam, (0, 0, 1))
    assert (pr.u, pr.v, pr.depth, pr.in_frustum) == (0.0, 0.0, 1.0, True)
    np.testing.assert_allclose(backproject(cam, 0, 0, 1), [0, 0, 1])


def test_on_axis_point_hits_principal_point():
    K = np.array([[100, 0, 50], [0, 100, 50], [0, 0, 1.0]])
    pr = project(CameraModel(K, np.eye(3), np.zeros(3), 100, 100), (0, 0, 2))
    assert (pr.u, pr.v, pr.depth) == (50.0, 50.0, 2.0)


def test_project_matches_matrix_chain():
    rng = np.random.default_rng(0)
    for _ in range(200):
        cam = random_camera(rng)
        p = rng.normal(size=3) * 5
        u, v, lam = chain_oracle(cam, p)
        pr = project(cam, p)
        if lam <= 0:
            assert not pr.in_frustum
            continue
        np.testing.assert_allclose([pr.u, pr.v, pr.depth], [u, v, lam], rtol=1e-9, atol=1e-9)


def test_projection_matrix_agrees():
    rng = np.random.default_rng(1)
    cam = random_camera(rng)
    p = rng.normal(size=3)
    h = cam.projection_matrix @ np.append(p, 1)
    u, v, d, _ = project_points(cam, p)
    np.testing.assert_allclose([u, v, d], [h[0] / h[2], h[1] / h[2], h[2]], rtol=1e-12)


def test_backproject_round_trip():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        cam = random_camera(rng)
        u, v = rng.uniform(0, cam.image_width), rng.uniform(0, cam.image_height)
        lam = rng.uniform(0.1, 50)
        pr = project(cam, backproject(cam, u, v, lam))
        worst = max(worst, abs(pr.u - u), abs(pr.v - v), abs(pr.depth - lam))
    assert worst < 1e-6


def test_principal_point_backprojects_onto_optical_axis():
    rng = np.random.default_rng(3)
    cam = random_camera(rng)
    cx, cy = cam.intrinsic[0, 2], cam.intrinsic[1, 2]
    # the skew term shifts the principal ray only through y, which is zero here
    for lam in (0.5, 3.0, 40.0):
        p = backproject(cam, cx, cy, lam)
        np.testing.assert_allclose(cam.rotation @ p + cam.translation, [0, 0, lam], atol=1e-9)


def test_backproject_rejects_nonpositive_depth():
    cam = CameraModel(np.eye(3), np.eye(3), np.zeros(3), 1, 1)
    for d in (0.0, -1.0):
        with pytest.raises(ValueError):
            backproject(cam, 0, 0, d)


def test_camera_center_is_degenerate():
    rng = np.random.default_rng(4)
    cam = random_camera(rng)
    pr = project(cam, cam.center)
    assert abs(pr.depth) < 1e-9
    assert not pr.in_frustum


def test_points_behind_camera_are_out_of_frustum():
    cam = CameraModel(np.eye(3), np.eye(3), np.zeros(3), 10, 10)
    u, v, d, inside = project_points(cam, np.array([[0, 0, -1.0], [0.1, 0.1, 1.0]]))
    assert np.isnan(u[0]) and not inside[0]
    assert inside[1]


def test_frustum_bounds_are_half_open():
    K = np.array([[10, 0, 5], [0, 10, 5], [0, 0, 1.0]])
    cam = CameraModel(K, np.eye(3), np.zeros(3), 10, 10)
    assert project(cam, (-0.5, -0.5, 1)).in_frustum  # u = v = 0
    assert not project(cam, (0.5, 0.0, 1)).in_frustum  # u = 10


def test_ray_through_principal_point_of_identity_camera():
    cam = CameraModel(np.eye(3), np.eye(3), np.zeros(3), 1, 1)
    o, d = ray_through_pixel(cam, 0, 0)
    np.testing.assert_allclose(o, 0)
    np.testing.assert_allclose(d, [0, 0, 1])


def test_ray_directions_are_unit_and_consistent_with_backproject():
    rng = np.random.default_rng(5)
    for _ in range(100):
        cam = random_camera(rng)
        u, v = rng.uniform(0, 640), rng.uniform(0, 480)
        o, d = ray_through_pixel(cam, u, v)
        assert abs(np.linalg.norm(d) - 1) < 1e-9
        for lam in (1.0, 7.0):
            p = backproject(cam, u, v, lam)
            s = (p - o) @ d
            assert s > 0
            np.testing.assert_allclose(o + s * d, p, atol=1e-6)


def test_pixel_rays_vectorized_matches_scalar():
    rng = np.random.default_rng(6)
    cam = random_camera(rng)
    u = rng.uniform(0, 640, size=(3, 4))
    v = rng.uniform(0, 480, size=(3, 4))
    _, d = pixel_rays(cam, u, v)
    for i in range(3):
        for j in range(4):
            np.testing.assert_allclose(d[i, j], ray_through_pixel(cam, u[i, j], v[i, j])[1], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    st.tuples(*[st.floats(-5, 5) for _ in range(2)]),
    st.floats(0.1, 20),
    st.floats(0.01, 100),
)
def test_projection_is_scale_invariant(xy, z, c):
    K = np.array([[300, 0, 160], [0, 300, 120], [0, 0, 1.0]])
    cam = CameraModel(K, np.eye(3), np.zeros(3), 320, 240)
    p = np.array([xy[0], xy[1], z])
    a, b = project(cam, p), project(cam, c * p)
    assert abs(a.u - b.u) < 1e-7 * max(1, abs(a.u))
    assert abs(a.v - b.v) < 1e-7 * max(1, abs(a.v))


def test_invalid_rotation_rejected():
    with pytest.raises(ValueError, match="orthonormal"):
        CameraModel(np.eye(3), np.diag([1, 1, 1.01]), np.zeros(3), 1, 1)
    with pytest.raises(ValueError, match="determinant"):
        CameraModel(np.eye(3), np.diag([1, 1, -1.0]), np.zeros(3), 1, 1)


def test_invalid_intrinsic_rejected():
    K = np.eye(3)
    K[2, 0] = 0.1
    with pytest.raises(ValueError, match="upper-triangular"):
        CameraModel(K, np.eye(3), np.zeros(3), 1, 1)
    with pytest.raises(ValueError, match="focal"):
        CameraModel(np.diag([-1, 1, 1.0]), np.eye(3), np.zeros(3), 1, 1)


def test_look_at_centers_target():
    K = intrinsic_from_fov(64, 48, 60)
    cam = CameraModel.look_at((5, -3, 2.5), (1, 2, 0), K, 64, 48)
    pr = project(cam, (1, 2, 0))
    assert abs(pr.u - 32) < 1e-9 and abs(pr.v - 24) < 1e-9
    # world up appears toward the top of the image
    assert project(cam, (1, 2, 1)).v < pr.v


def test_intrinsic_from_fov_edge_ray():
    K = intrinsic_from_fov(100, 80, 90)
    cam = CameraModel(K, np.eye(3), np.zeros(3), 100, 80)
    # a 45 degree ray lands on the image's right edge
    assert abs(project(cam, (1, 0, 1)).u - 100) < 1e-9
