import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockslam import geometry as geo
from blockslam.errors import ContractViolation, InvalidDepthError


K = geo.Intrinsics(fx=50.0, fy=55.0, cx=31.5, cy=23.5, width=64, height=48)


def random_pose(rng, max_angle=3.0):
    omega = rng.standard_normal(3)
    n = np.linalg.norm(omega)
    if n > 0:
        omega = omega / n * rng.uniform(0.0, max_angle)
    rho = rng.standard_normal(3)
    return geo.se3_exp(np.concatenate([rho, omega]))


class TestSe3Exp:
    def test_zero_is_identity(self):
        p = geo.se3_exp(np.zeros(6))
        assert np.allclose(p.rotation, np.eye(3))
        assert np.allclose(p.translation, 0.0)

    def test_quarter_turn_about_x(self):
        p = geo.se3_exp([0, 0, 0, math.pi / 2, 0, 0])
        expected = np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float)
        assert np.allclose(p.rotation, expected, atol=1e-12)
        assert np.allclose(p.translation, 0.0)

    def test_round_trip_norm_03(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            xi = rng.standard_normal(6)
            xi = 0.3 * xi / np.linalg.norm(xi)
            back = geo.se3_log(geo.se3_exp(xi))
            assert np.allclose(back, xi, atol=1e-10)

    def test_round_trip_large_rotation(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            xi = rng.standard_normal(6)
            xi[3:] = xi[3:] / np.linalg.norm(xi[3:]) * rng.uniform(0.0, 3.0)
            back = geo.se3_log(geo.se3_exp(xi))
            assert np.allclose(back, xi, atol=1e-10)

    def test_small_angle_branch(self):
        xi = np.array([0.1, -0.2, 0.3, 1e-9, -2e-9, 5e-10])
        back = geo.se3_log(geo.se3_exp(xi))
        assert np.allclose(back, xi, atol=1e-14)

    def test_nonfinite_rejected(self):
        with pytest.raises(ContractViolation):
            geo.se3_exp([np.nan, 0, 0, 0, 0, 0])


class TestComposeInvert:
    def test_identity_neutral(self):
        rng = np.random.default_rng(0)
        p = random_pose(rng)
        q = geo.compose(geo.Pose.identity(), p)
        assert np.allclose(q.rotation, p.rotation)
        assert np.allclose(q.translation, p.translation)

    def test_double_invert(self):
        rng = np.random.default_rng(1)
        p = random_pose(rng)
        q = geo.invert(geo.invert(p))
        assert np.allclose(q.rotation, p.rotation, atol=1e-12)
        assert np.allclose(q.translation, p.translation, atol=1e-12)

    def test_translations_add(self):
        a = geo.Pose(np.eye(3), np.array([1.0, 2.0, 3.0]))
        b = geo.Pose(np.eye(3), np.array([-0.5, 0.25, 1.0]))
        c = geo.compose(a, b)
        assert np.allclose(c.translation, [0.5, 2.25, 4.0])

    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(2)
        p = random_pose(rng)
        q = geo.compose(p, geo.invert(p))
        assert np.allclose(q.rotation, np.eye(3), atol=1e-9)
        assert np.allclose(q.translation, 0.0, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_associativity(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (random_pose(rng) for _ in range(3))
        lhs = geo.compose(geo.compose(a, b), c)
        rhs = geo.compose(a, geo.compose(b, c))
        assert np.allclose(lhs.rotation, rhs.rotation, atol=1e-12)
        assert np.allclose(lhs.translation, rhs.translation, atol=1e-11)


class TestRays:
    def test_principal_point(self):
        r = geo.generate_ray(geo.Pose.identity(), K, K.cx, K.cy)
        assert np.allclose(r.direction, [0, 0, 1])
        assert np.allclose(r.origin, 0.0)

    def test_one_focal_right(self):
        wide = geo.Intrinsics(fx=50.0, fy=50.0, cx=100.0, cy=80.0, width=201, height=161)
        r = geo.generate_ray(geo.Pose.identity(), wide, wide.cx + wide.fx, wide.cy)
        assert np.allclose(r.direction, [1, 0, 1])

    def test_rotated_pose(self):
        # 90 degree yaw: camera z axis maps to world -x (for R = exp(pi/2 * ez)).
        wide = geo.Intrinsics(fx=50.0, fy=50.0, cx=100.0, cy=80.0, width=201, height=161)
        pose = geo.se3_exp([0.5, -1.0, 2.0, 0.0, 0.0, math.pi / 2])
        u, v = wide.cx + wide.fx, wide.cy - wide.fy
        r = geo.generate_ray(pose, wide, u, v)
        d_cam = np.array([1.0, -1.0, 1.0])
        assert np.allclose(r.direction, pose.rotation @ d_cam, atol=1e-12)
        assert np.allclose(r.origin, pose.translation)

    def test_out_of_bounds_pixel(self):
        with pytest.raises(ContractViolation):
            geo.generate_ray(geo.Pose.identity(), K, -1.0, 0.0)
        with pytest.raises(ContractViolation):
            geo.generate_ray(geo.Pose.identity(), K, 0.0, K.height)

    def test_ray_matches_backproject(self):
        rng = np.random.default_rng(5)
        pose = random_pose(rng)
        u, v, d = 12.0, 33.0, 2.7
        r = geo.generate_ray(pose, K, u, v)
        assert np.allclose(r.at(d), geo.backproject(pose, K, u, v, d))


class TestProjectBackproject:
    def test_principal_point_depth2(self):
        p = geo.backproject(geo.Pose.identity(), K, K.cx, K.cy, 2.0)
        assert np.allclose(p, [0, 0, 2])

    def test_translated_pose(self):
        pose = geo.Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))
        p = geo.backproject(pose, K, K.cx, K.cy, 2.0)
        assert np.allclose(p, [1, 0, 2])

    def test_invalid_depth(self):
        with pytest.raises(InvalidDepthError):
            geo.backproject(geo.Pose.identity(), K, 1.0, 1.0, 0.0)

    def test_project_axis_point(self):
        res = geo.project(geo.Pose.identity(), K, [0.0, 0.0, 2.0])
        assert res is not None
        u, v, z = res
        assert np.allclose([u, v, z], [K.cx, K.cy, 2.0])

    def test_behind_camera(self):
        assert geo.project(geo.Pose.identity(), K, [0.0, 0.0, -1.0]) is None

    def test_round_trip_10k(self):
        rng = np.random.default_rng(11)
        pose = random_pose(rng)
        n = 10_000
        us = rng.uniform(0, K.width - 1, n)
        vs = rng.uniform(0, K.height - 1, n)
        ds = rng.uniform(0.05, 9.0, n)
        pts = geo.backproject_pixels(pose, K, us, vs, ds)
        uv, z, ok = geo.project_points(pose, K, pts)
        assert ok.all()
        assert np.allclose(uv[:, 0], us, atol=1e-9)
        assert np.allclose(uv[:, 1], vs, atol=1e-9)
        assert np.allclose(z, ds, atol=1e-9)

    def test_scalar_round_trip(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            pose = random_pose(rng)
            u, v = rng.uniform(0, K.width - 1), rng.uniform(0, K.height - 1)
            d = rng.uniform(0.1, 5.0)
            res = geo.project(pose, K, geo.backproject(pose, K, u, v, d))
            assert res is not None
            assert np.allclose(res, [u, v, d], atol=1e-9)


class TestFrustum:
    def test_on_axis_midrange(self):
        mid = (0.1 + 5.0) / 2
        assert geo.frustum_contains(geo.Pose.identity(), K, [0, 0, mid], 0.1, 5.0)

    def test_behind(self):
        assert not geo.frustum_contains(geo.Pose.identity(), K, [0, 0, -1.0], 0.1, 5.0)

    def test_corner_at_far(self):
        far = 5.0
        corner = geo.backproject(geo.Pose.identity(), K, 0.0, 0.0, far)
        assert geo.frustum_contains(geo.Pose.identity(), K, corner, 0.1, far)
        beyond = geo.backproject(geo.Pose.identity(), K, 0.0, 0.0, far + 1e-6)
        assert not geo.frustum_contains(geo.Pose.identity(), K, beyond, 0.1, far)

    def test_bad_near_far(self):
        with pytest.raises(ContractViolation):
            geo.frustum_contains(geo.Pose.identity(), K, [0, 0, 1], 2.0, 1.0)

    def test_planes_agree_with_contains(self):
        rng = np.random.default_rng(17)
        pose = random_pose(rng)
        near, far = 0.2, 6.0
        normals, offsets = geo.frustum_planes(pose, K, near, far)
        pts = rng.uniform(-8, 8, size=(3000, 3))
        inside_planes = np.all(pts @ normals.T + offsets >= -1e-12, axis=1)
        inside_direct = np.array(
            [geo.frustum_contains(pose, K, p, near, far) for p in pts]
        )
        assert (inside_planes == inside_direct).all()

    def test_vertices_on_boundary(self):
        rng = np.random.default_rng(19)
        pose = random_pose(rng)
        near, far = 0.3, 4.0
        verts = geo.frustum_vertices(pose, K, near, far)
        normals, offsets = geo.frustum_planes(pose, K, near, far)
        vals = verts @ normals.T + offsets
        assert vals.min() > -1e-9  # all vertices inside or on the boundary
        # each vertex lies exactly on 3 planes
        on_plane = np.isclose(vals, 0.0, atol=1e-9).sum(axis=1)
        assert (on_plane == 3).all()


class TestPoseValidation:
    def test_non_orthonormal_rejected(self):
        bad = np.eye(3)
        bad[0, 1] = 1e-6
        with pytest.raises(ContractViolation):
            geo.Pose(bad, np.zeros(3))

    def test_reflection_rejected(self):
        bad = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ContractViolation):
            geo.Pose(bad, np.zeros(3))
