import math
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from blockslam import dataio as dio
from blockslam import synthetic as syn
from blockslam.errors import ConfigError, DataError
from blockslam.geometry import Intrinsics, Pose, se3_exp


K = Intrinsics(fx=40.0, fy=40.0, cx=31.5, cy=23.5, width=64, height=48)


class TestConfig:
    def test_defaults_valid(self):
        cfg = dio.Config()
        assert cfg.tau_th == 0.2
        assert cfg.table_size == 2**15
        assert cfg.res_max == 250            # 5.0 m / 0.02 m
        assert cfg.encode_dim == 32
        assert cfg.smooth_eps == pytest.approx(0.02)

    def test_res_max_follows_block_size(self):
        cfg = dio.Config(block_size=2.5)
        assert cfg.res_max == 125

    def test_render_band_auto(self):
        cfg = dio.Config()
        assert cfg.render_band == pytest.approx(0.01)
        cfg2 = dio.Config(render_bandwidth=0.05)
        assert cfg2.render_band == 0.05

    def test_profile_tum(self):
        cfg = dio.load_config(profile="tum")
        assert cfg.lr_pose_tracking == pytest.approx(1e-2)
        assert cfg.truncation == pytest.approx(0.05)
        assert cfg.iters_mapping == 20

    def test_profile_scannet(self):
        cfg = dio.load_config(profile="scannet")
        assert cfg.n1 == 96 and cfg.n2 == 21

    def test_unknown_profile(self):
        with pytest.raises(ConfigError):
            dio.load_config(profile="nonsense")

    def test_file_and_overrides(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text(
            "# comment\n[default]\ntau_th = 0.25\nn_t = 128\n"
            "[tum]\nn_t = 64\n"
        )
        cfg = dio.load_config(p)
        assert cfg.tau_th == 0.25 and cfg.n_t == 128
        cfg_tum = dio.load_config(p, profile="tum")
        assert cfg_tum.n_t == 64 and cfg_tum.truncation == 0.05
        cfg_ov = dio.load_config(p, overrides={"tau_th": 0.5})
        assert cfg_ov.tau_th == 0.5

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("bogus_key = 1\n")
        with pytest.raises(ConfigError):
            dio.load_config(p)

    def test_parse_overrides(self):
        ov = dio.parse_overrides(["block_size=2.5", "loop_enabled=false", "n_t=99"])
        assert ov == {"block_size": 2.5, "loop_enabled": False, "n_t": 99}
        with pytest.raises(ConfigError):
            dio.parse_overrides(["nonsense=1"])
        with pytest.raises(ConfigError):
            dio.parse_overrides(["block_size"])

    def test_validation(self):
        with pytest.raises(ConfigError):
            dio.Config(tau_th=1.5)
        with pytest.raises(ConfigError):
            dio.Config(near=5.0, far=1.0)
        with pytest.raises(ConfigError):
            dio.Config(keep_fraction=0.0)

    def test_items_round_trip(self):
        cfg = dio.Config(seed=42)
        items = dict(cfg.items())
        assert items["seed"] == 42 and "tau_th" in items


class TestRngSplit:
    def test_deterministic(self):
        a = dio.rng_for(7, "tracking").random(4)
        b = dio.rng_for(7, "tracking").random(4)
        assert np.array_equal(a, b)

    def test_labels_independent(self):
        a = dio.rng_for(7, "tracking").random(4)
        b = dio.rng_for(7, "mapping").random(4)
        assert not np.array_equal(a, b)


@pytest.fixture(scope="module")
def tiny_sequence(tmp_path_factory):
    out = tmp_path_factory.mktemp("seq")
    scene = syn.make_room_scene(4.0, 3.0, 2.5)
    traj = [
        syn.look_at_pose([2.0 - 0.02 * i, 1.5, 1.2], [4.0, 1.5, 1.2])
        for i in range(3)
    ]
    syn.generate_synthetic(scene, traj, K, out, seed=5)
    return out, scene, traj


class TestLoadTum:
    def test_three_frames(self, tiny_sequence):
        out, _, traj = tiny_sequence
        seq = dio.load_tum(out)
        assert len(seq) == 3
        assert seq.groundtruth is not None and len(seq.groundtruth) == 3
        assert seq.intrinsics.fx == K.fx

    def test_depth_scale_convention(self, tmp_path):
        # raw value 5000 -> 1.0 m
        (tmp_path / "rgb").mkdir()
        (tmp_path / "depth").mkdir()
        rgb = np.zeros((4, 4, 3), dtype=np.uint8)
        Image.fromarray(rgb, "RGB").save(tmp_path / "rgb" / "a.png")
        raw = np.full((4, 4), 5000, dtype=np.uint16)
        Image.fromarray(raw, "I;16").save(tmp_path / "depth" / "a.png")
        (tmp_path / "rgb.txt").write_text("0.0 rgb/a.png\n")
        (tmp_path / "depth.txt").write_text("0.0 depth/a.png\n")
        (tmp_path / "calibration.txt").write_text("10 10 1.5 1.5 4 4 5000\n")
        seq = dio.load_tum(tmp_path)
        assert seq.frames[0].depth[0, 0] == pytest.approx(1.0)

    def test_association_gap_dropped(self, tmp_path, caplog):
        (tmp_path / "rgb").mkdir()
        (tmp_path / "depth").mkdir()
        img = np.zeros((2, 2, 3), dtype=np.uint8)
        d = np.zeros((2, 2), dtype=np.uint16)
        for name in ("a", "b"):
            Image.fromarray(img, "RGB").save(tmp_path / "rgb" / f"{name}.png")
            Image.fromarray(d, "I;16").save(tmp_path / "depth" / f"{name}.png")
        (tmp_path / "rgb.txt").write_text("0.00 rgb/a.png\n1.00 rgb/b.png\n")
        # second depth is offset by 0.03 s: beyond the association window
        (tmp_path / "depth.txt").write_text("0.00 depth/a.png\n1.03 depth/b.png\n")
        (tmp_path / "calibration.txt").write_text("10 10 0.5 0.5 2 2 5000\n")
        import logging
        with caplog.at_level(logging.WARNING):
            seq = dio.load_tum(tmp_path)
        assert len(seq) == 1
        assert any("dropped" in r.message for r in caplog.records)

    def test_missing_files(self, tmp_path):
        with pytest.raises(DataError):
            dio.load_tum(tmp_path)

    def test_bad_line(self, tmp_path):
        (tmp_path / "rgb.txt").write_text("not-a-timestamp rgb/x.png\n")
        (tmp_path / "depth.txt").write_text("")
        with pytest.raises(DataError, match="rgb.txt:1"):
            dio.load_tum(tmp_path, intrinsics=K)


class TestTrajectoryIo:
    def test_identity_line(self, tmp_path):
        path = tmp_path / "traj.txt"
        dio.write_trajectory([Pose.identity()], [1.5], path)
        fields = path.read_text().split()
        assert fields[0] == "1.500000"
        assert fields[1:] == ["0", "0", "0", "0", "0", "0", "1"]

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        poses = [se3_exp(rng.standard_normal(6)) for _ in range(10)]
        ts = [0.1 * i for i in range(10)]
        path = tmp_path / "traj.txt"
        dio.write_trajectory(poses, ts, path)
        loaded = dio.load_trajectory(path)
        assert len(loaded) == 10
        for (t, p), p0, t0 in zip(loaded, poses, ts):
            assert t == pytest.approx(t0, abs=1e-6)
            assert np.allclose(p.rotation, p0.rotation, atol=1e-12)
            assert np.allclose(p.translation, p0.translation, atol=1e-12)

    def test_quaternion_round_trip(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            p = se3_exp(rng.standard_normal(6))
            q = dio.rotation_to_quaternion(p.rotation)
            r = dio.quaternion_to_rotation(q)
            assert np.allclose(r, p.rotation, atol=1e-12)

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0.0 1 2 3\n")
        with pytest.raises(DataError):
            dio.load_trajectory(path)


class TestSynthetic:
    def test_wall_depth(self, tiny_sequence):
        out, _, _ = tiny_sequence
        seq = dio.load_tum(out)
        # camera 2 m from the x = 4 wall, looking straight at it
        d = seq.frames[0].depth[24, 32]
        assert d == pytest.approx(2.0, abs=1e-3)

    def test_deterministic_bytes(self, tmp_path):
        scene = syn.make_room_scene(4.0, 3.0, 2.5)
        traj = [syn.look_at_pose([2.0, 1.5, 1.2], [4.0, 1.5, 1.2])]
        a = tmp_path / "a"
        b = tmp_path / "b"
        syn.generate_synthetic(scene, traj, K, a, depth_noise_sigma=0.01, seed=9)
        syn.generate_synthetic(scene, traj, K, b, depth_noise_sigma=0.01, seed=9)
        for rel in ("rgb/0.000000.png", "depth/0.000000.png", "groundtruth.txt"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_out_of_free_space_names_pose(self, tmp_path):
        scene = syn.make_room_scene(4.0, 3.0, 2.5)
        traj = [
            syn.look_at_pose([2.0, 1.5, 1.2], [4.0, 1.5, 1.2]),
            syn.look_at_pose([4.15, 1.5, 1.2], [0.0, 1.5, 1.2]),  # inside the x=4 wall
        ]
        with pytest.raises(DataError, match="pose 1"):
            syn.generate_synthetic(scene, traj, K, tmp_path / "x")

    def test_sphere_silhouette(self):
        scene = syn.SyntheticScene(
            [syn.Primitive("sphere", (0, 0, 3.0), (0.5, 0, 0), (1, 0, 0))],
            ((-5, -5, 0), (5, 5, 10)),
        )
        k2 = Intrinsics(fx=60.0, fy=60.0, cx=63.5, cy=47.5, width=128, height=96)
        depth, _ = syn.render_view(scene, Pose(np.eye(3), np.zeros(3)), k2)
        row = depth[48, :]
        us = np.nonzero((row > 0) & (row < 5.0))[0]
        measured = (us.max() - us.min()) / 2.0 + 0.5
        expected = 60.0 * 0.5 / math.sqrt(9.0 - 0.25)
        assert abs(measured - expected) <= 1.0

    def test_depth_matches_analytic_sdf(self, tiny_sequence):
        out, scene, traj = tiny_sequence
        seq = dio.load_tum(out)
        rng = np.random.default_rng(11)
        frame = seq.frames[1]
        pose = traj[1]
        depth = frame.depth
        n = 1000
        us = rng.integers(0, K.width, n)
        vs = rng.integers(0, K.height, n)
        d = depth[vs, us]
        ok = d > 0
        from blockslam.geometry import backproject_pixels
        pts = backproject_pixels(pose, K, us[ok].astype(float), vs[ok].astype(float), d[ok])
        # surface points: |sdf| below sphere-tracing tolerance (along-ray)
        assert np.abs(scene.sdf(pts)).max() < 1e-3

    def test_scene_json_round_trip(self, tmp_path, tiny_sequence):
        out, scene, _ = tiny_sequence
        loaded = syn.SyntheticScene.load(out / "scene.json")
        rng = np.random.default_rng(12)
        pts = rng.uniform(-1, 5, (100, 3))
        assert np.allclose(loaded.sdf(pts), scene.sdf(pts), atol=1e-12)

    def test_lipschitz_bound(self, tiny_sequence):
        _, scene, _ = tiny_sequence
        rng = np.random.default_rng(13)
        a = rng.uniform(-2, 6, (500, 3))
        b = a + rng.normal(0, 0.1, (500, 3))
        lhs = np.abs(scene.sdf(a) - scene.sdf(b))
        rhs = np.linalg.norm(a - b, axis=1)
        assert np.all(lhs <= rhs + 1e-9)


class TestMeshPly:
    def test_round_trip_single_triangle(self, tmp_path):
        from blockslam.evaluation import Mesh
        mesh = Mesh(
            vertices=np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.5]]),
            faces=np.array([[0, 1, 2]]),
            colors=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
        )
        path = tmp_path / "tri.ply"
        dio.write_mesh_ply(mesh, path)
        verts, faces, colors = parse_ply(path)
        assert np.allclose(verts, mesh.vertices, atol=1e-6)
        assert np.array_equal(faces, mesh.faces)
        assert np.allclose(colors / 255.0, mesh.colors, atol=1 / 255)

    def test_colorless(self, tmp_path):
        from blockslam.evaluation import Mesh
        mesh = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))
        path = tmp_path / "t.ply"
        dio.write_mesh_ply(mesh, path)
        verts, faces, colors = parse_ply(path)
        assert colors is None
        assert len(verts) == 3 and len(faces) == 1


def parse_ply(path):
    """Independent minimal binary-PLY reader used as the round-trip oracle."""
    import struct

    data = Path(path).read_bytes()
    head_end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:head_end].decode("ascii").splitlines()
    n_vert = n_face = 0
    has_color = False
    for line in header:
        if line.startswith("element vertex"):
            n_vert = int(line.split()[-1])
        elif line.startswith("element face"):
            n_face = int(line.split()[-1])
        elif line.startswith("property uchar red"):
            has_color = True
    off = head_end
    verts = np.empty((n_vert, 3), dtype=np.float32)
    colors = np.empty((n_vert, 3), dtype=np.uint8) if has_color else None
    stride = 12 + (3 if has_color else 0)
    for i in range(n_vert):
        verts[i] = struct.unpack_from("<fff", data, off)
        if has_color:
            colors[i] = struct.unpack_from("<BBB", data, off + 12)
        off += stride
    faces = np.empty((n_face, 3), dtype=np.int64)
    for i in range(n_face):
        cnt = data[off]
        assert cnt == 3
        faces[i] = struct.unpack_from("<iii", data, off + 1)
        off += 13
    return verts, faces, colors


class TestRunlog:
    def test_embedded_config_and_rows(self, tmp_path):
        path = tmp_path / "runlog.csv"
        dio.write_runlog_csv(
            [{"frame": 0, "tau": 1.0}, {"frame": 1, "tau": 0.125}],
            path, config_items=[("seed", 7), ("tau_th", 0.2)],
        )
        lines = path.read_text().splitlines()
        assert lines[0] == "# seed = 7"
        assert lines[1] == "# tau_th = 0.2"
        assert lines[2] == "frame,tau"
        assert lines[4] == "1,0.125"
