import numpy as np
import pytest

from blockslam import evaluation as ev
from blockslam import synthetic as syn
from blockslam.blocks import BlockAtlas
from blockslam.encoders import HashGridConfig
from blockslam.errors import DataError
from blockslam.geometry import Intrinsics, Pose, se3_exp, compose

from oracles import brute_force_mesh_distance, point_triangle_distance_exact

K = Intrinsics(fx=40.0, fy=40.0, cx=31.5, cy=23.5, width=64, height=48)


def empty_atlas(block_size=2.0, centers=()):
    atlas = BlockAtlas(HashGridConfig(1, 64, 2, 2, 2, block_size), None)
    rng = np.random.default_rng(0)
    for c in centers:
        atlas.allocate(list(c), 0, rng)
    return atlas


def analytic_sphere_query(center, radius):
    def q(pts):
        sdf = np.linalg.norm(pts - np.asarray(center), axis=1) - radius
        return sdf, np.ones(len(pts), dtype=np.int64), None
    return q


def random_small_mesh(rng, n_tri=8, scale=1.0):
    verts = rng.uniform(-scale, scale, (n_tri * 3, 3))
    faces = np.arange(n_tri * 3).reshape(n_tri, 3)
    return ev.Mesh(verts, faces)


class TestExtractMesh:
    def test_sphere_radii(self):
        atlas = empty_atlas(block_size=2.0, centers=[(0.0, 0.0, 0.0)])
        voxel = 0.05
        mesh = ev.extract_mesh(analytic_sphere_query((0, 0, 0), 0.6), atlas, voxel)
        assert not mesh.is_empty
        r = np.linalg.norm(mesh.vertices, axis=1)
        assert np.abs(r - 0.6).max() < voxel / 2

    def test_empty_atlas(self):
        atlas = empty_atlas()
        mesh = ev.extract_mesh(analytic_sphere_query((0, 0, 0), 0.5), atlas, 0.1)
        assert mesh.is_empty

    def test_all_positive_sdf(self):
        atlas = empty_atlas(block_size=2.0, centers=[(0.0, 0.0, 0.0)])
        q = lambda pts: (np.full(len(pts), 0.5), np.ones(len(pts), dtype=np.int64), None)
        mesh = ev.extract_mesh(q, atlas, 0.1)
        assert mesh.is_empty

    def test_vertices_welded(self):
        atlas = empty_atlas(block_size=2.0, centers=[(0.0, 0.0, 0.0)])
        mesh = ev.extract_mesh(analytic_sphere_query((0, 0, 0), 0.5), atlas, 0.1)
        key = np.round(mesh.vertices / 1e-6)
        assert len(np.unique(key, axis=0)) == len(mesh.vertices)


class TestCullMesh:
    def _plane_mesh(self):
        # unit grid on the z = 2 plane in front of an identity camera
        xs = np.linspace(-0.5, 0.5, 5)
        verts = np.array([[x, y, 2.0] for x in xs for y in xs])
        faces = []
        for i in range(4):
            for j in range(4):
                a = i * 5 + j
                faces.append([a, a + 1, a + 5])
                faces.append([a + 1, a + 6, a + 5])
        return ev.Mesh(verts, np.array(faces))

    def test_unseen_removed_seen_kept(self):
        mesh = self._plane_mesh()
        pose = Pose.identity()
        depth = np.full((K.height, K.width), 2.0)
        culled = ev.cull_mesh(mesh, [pose], K, [depth], tr=0.1)
        assert len(culled.faces) == len(mesh.faces)  # all visible at measured depth
        # camera looking away sees nothing
        away = se3_exp([0, 0, 0, 0, np.pi, 0])
        culled2 = ev.cull_mesh(mesh, [away], K, [depth], tr=0.1)
        assert culled2.is_empty

    def test_occluded_vertex_removed(self):
        mesh = self._plane_mesh()
        pose = Pose.identity()
        depth = np.full((K.height, K.width), 1.5)  # observed surface at 1.5 m
        culled = ev.cull_mesh(mesh, [pose], K, [depth], tr=0.1)
        assert culled.is_empty  # plane at 2.0 is 0.5 m behind observed + tr

    def test_boundary_inclusive(self):
        mesh = self._plane_mesh()
        depth = np.full((K.height, K.width), 2.0)
        culled = ev.cull_mesh(mesh, [Pose.identity()], K, [depth], tr=0.0)
        assert len(culled.faces) == len(mesh.faces)

    def test_idempotent(self):
        mesh = self._plane_mesh()
        depth = np.full((K.height, K.width), 2.0)
        depth[:, :20] = 0.0  # part of the view has no measurement
        once = ev.cull_mesh(mesh, [Pose.identity()], K, [depth], tr=0.1)
        twice = ev.cull_mesh(once, [Pose.identity()], K, [depth], tr=0.1)
        assert np.array_equal(once.vertices, twice.vertices)
        assert np.array_equal(once.faces, twice.faces)


class TestAteRmse:
    def _traj(self, rng, n=20):
        out = []
        pose = Pose.identity()
        for i in range(n):
            pose = compose(se3_exp(rng.standard_normal(6) * 0.05), pose)
            out.append((float(i), pose))
        return out

    def test_identical_zero(self):
        rng = np.random.default_rng(0)
        t = self._traj(rng)
        assert ev.ate_rmse(t, t) == pytest.approx(0.0, abs=1e-9)

    def test_rigid_transform_invariance(self):
        rng = np.random.default_rng(1)
        gt = self._traj(rng)
        offset = se3_exp(rng.standard_normal(6))
        est = [(t, compose(offset, p)) for t, p in gt]
        assert ev.ate_rmse(est, gt) == pytest.approx(0.0, abs=1e-9)

    def test_two_residual_case(self):
        # after alignment, residuals (0,0,0) and (+-1cm,0,0): rmse = 1 cm
        gt = [(0.0, Pose.identity()),
              (1.0, Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))),
              (2.0, Pose(np.eye(3), np.array([2.0, 0.0, 0.0])))]
        est = [(0.0, Pose.identity()),
               (1.0, Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))),
               (2.0, Pose(np.eye(3), np.array([2.02, 0.0, 0.0])))]
        # alignment distributes the 2 cm error; verify against a brute-force
        # grid search over planar alignments
        val = ev.ate_rmse(est, gt)
        best = np.inf
        for dx in np.linspace(-0.03, 0.03, 601):
            e = np.array([0.0, 1.0, 2.02]) + dx
            g = np.array([0.0, 1.0, 2.0])
            best = min(best, np.sqrt(((e - g) ** 2).mean()))
        assert val == pytest.approx(best * 100.0, abs=1e-3)

    def test_too_few_pairs(self):
        t = [(0.0, Pose.identity()), (1.0, Pose.identity())]
        with pytest.raises(DataError):
            ev.ate_rmse(t, t)


class TestDepthL1:
    def _box_mesh(self, shift=0.0):
        # block comfortably encloses the walls so no surface sits on the mask edge
        atlas = empty_atlas(block_size=6.0, centers=[(2.0, 1.5, 1.25)])
        scene = syn.make_room_scene(4.0, 3.0, 2.5)
        def q(pts):
            return scene.sdf(pts) - shift, np.ones(len(pts), dtype=np.int64), None
        return ev.extract_mesh(q, atlas, 0.1)

    def test_identical_zero(self):
        mesh = self._box_mesh()
        scene = syn.make_room_scene(4.0, 3.0, 2.5)
        rng = np.random.default_rng(2)
        v = ev.depth_l1(mesh, mesh, scene, K, 5, rng)
        assert v == pytest.approx(0.0, abs=1e-12)

    def test_plane_offset_one_cm(self):
        # fronto-parallel plane pair 1 cm apart
        verts_a = np.array([[x, y, 2.0] for x in (-3.0, 3.0) for y in (-3.0, 3.0)])
        verts_b = verts_a + [0, 0, 0.01]
        faces = np.array([[0, 1, 2], [1, 3, 2]])
        a = ev.Mesh(verts_a, faces)
        b = ev.Mesh(verts_b, faces)
        pose = Pose.identity()
        d_a = ev.rasterize_depth(a, pose, K)
        d_b = ev.rasterize_depth(b, pose, K)
        both = (d_a > 0) & (d_b > 0)
        assert both.all()
        assert np.abs(d_a - d_b)[both].mean() == pytest.approx(0.01, rel=1e-6)

    def test_rasterizer_matches_brute_force_raycast(self):
        mesh = self._box_mesh()
        pose = syn.look_at_pose([2.0, 1.5, 1.25], [4.0, 1.5, 1.25])
        small = Intrinsics(fx=20.0, fy=20.0, cx=15.5, cy=11.5, width=32, height=24)
        fast = ev.rasterize_depth(mesh, pose, small)
        slow = brute_force_raycast_depth(mesh, pose, small)
        both = (fast > 0) & (slow > 0)
        assert both.mean() > 0.95
        assert np.abs(fast[both] - slow[both]).max() < 1e-6

    def test_dilated_room_close_to_dilation(self):
        rec = self._box_mesh(shift=0.0)
        gt = self._box_mesh(shift=-0.02)  # eroded free space: walls shifted 2 cm
        scene = syn.make_room_scene(4.0, 3.0, 2.5)
        rng = np.random.default_rng(3)
        v = ev.depth_l1(rec, gt, scene, K, 5, rng)
        assert 1.0 < v < 3.5  # 2 cm shift, marching-cubes quantization noise


def brute_force_raycast_depth(mesh, pose, k):
    """Per-pixel nearest ray-triangle intersection (Moller-Trumbore)."""
    depth = np.zeros((k.height, k.width))
    tri = mesh.vertices[mesh.faces]
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    for v in range(k.height):
        for u in range(k.width):
            d_cam = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
            d_world = pose.rotation @ d_cam
            o = pose.translation
            p = np.cross(d_world, e2)
            det = np.einsum("ij,ij->i", e1, p)
            ok = np.abs(det) > 1e-12
            inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
            tvec = o - v0
            bu = np.einsum("ij,ij->i", tvec, p) * inv
            q = np.cross(tvec, e1)
            bv = np.einsum("j,ij->i", d_world, q) * inv
            t = np.einsum("ij,ij->i", e2, q) * inv
            hit = ok & (bu >= -1e-9) & (bv >= -1e-9) & (bu + bv <= 1 + 1e-9) & (t > 1e-6)
            if hit.any():
                depth[v, u] = t[hit].min()
    return depth


class TestAccComp:
    def test_identical_meshes(self):
        atlas = empty_atlas(block_size=2.0, centers=[(0.0, 0.0, 0.0)])
        mesh = ev.extract_mesh(analytic_sphere_query((0, 0, 0), 0.6), atlas, 0.05)
        rng = np.random.default_rng(4)
        acc, comp, ratio = ev.acc_comp(mesh, mesh, 2000, 0.05, rng)
        assert acc < 0.05 and comp < 0.05  # cm; samples on the same surface
        assert ratio == 100.0

    def test_parallel_squares(self):
        faces = np.array([[0, 1, 2], [1, 3, 2]])
        a = ev.Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float), faces)
        b = ev.Mesh(np.array([[0, 0, 0.03], [1, 0, 0.03], [0, 1, 0.03], [1, 1, 0.03]]), faces)
        rng = np.random.default_rng(5)
        acc, comp, ratio = ev.acc_comp(a, b, 5000, 0.05, rng)
        assert acc == pytest.approx(3.0, abs=1e-9)
        assert comp == pytest.approx(3.0, abs=1e-9)
        assert ratio == 100.0

    def test_matches_brute_force_all_pairs(self):
        rng = np.random.default_rng(6)
        for trial in range(4):
            a = random_small_mesh(rng, n_tri=6)
            b = random_small_mesh(rng, n_tri=5)
            pts = rng.uniform(-1.2, 1.2, (40, 3))
            fast = ev.MeshDistanceIndex(b).distances(pts)
            slow = brute_force_mesh_distance(pts, b.vertices, b.faces)
            assert np.abs(fast - slow).max() < 1e-9

    def test_point_triangle_against_reference(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            tri = rng.uniform(-1, 1, (3, 3))
            p = rng.uniform(-1.5, 1.5, 3)
            fast = ev.point_triangle_distances(p.reshape(1, 3), tri.reshape(1, 3, 3))[0]
            slow = point_triangle_distance_exact(p, tri)
            assert fast == pytest.approx(slow, abs=1e-12)

    def test_zero_area_mesh_rejected(self):
        degenerate = ev.Mesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
        rng = np.random.default_rng(8)
        with pytest.raises(DataError):
            ev.acc_comp(degenerate, degenerate, 10, 0.05, rng)
