"""Analytic SDF scenes and the synthetic RGB-D sequence generator.

Scenes are unions of axis-aligned boxes and spheres (exact signed distances,
so the union SDF is 1-Lipschitz). Sequences are rendered by sphere tracing
and written in TUM layout (rgb/, depth/, rgb.txt, depth.txt, groundtruth.txt)
plus scene.json so evaluation can rebuild the ground-truth geometry.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .geometry import Intrinsics, Pose
from .dataio import rotation_to_quaternion, write_trajectory

SPHERE_TRACE_STEPS = 128
SPHERE_TRACE_EPS = 1e-4
LIGHT_DIR = np.array([0.35, -0.5, 0.75]) / np.linalg.norm([0.35, -0.5, 0.75])


@dataclass(frozen=True)
class Primitive:
    kind: str                 # "box" | "sphere"
    center: tuple
    size: tuple               # half-extents for boxes, (radius, 0, 0) for spheres
    color: tuple

    def sdf(self, p: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        if self.kind == "sphere":
            return np.linalg.norm(p - c, axis=-1) - self.size[0]
        q = np.abs(p - c) - np.asarray(self.size)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


class SyntheticScene:
    """Union of colored primitives with an exact-SDF query."""

    def __init__(self, primitives: list[Primitive], extent: tuple):
        if not primitives:
            raise DataError("a scene needs at least one primitive")
        self.primitives = primitives
        self.extent = extent  # (min_xyz, max_xyz) of the interesting region

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        vals = np.stack([prim.sdf(p) for prim in self.primitives], axis=-1)
        return vals.min(axis=-1)

    def nearest_primitive(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        vals = np.stack([prim.sdf(p) for prim in self.primitives], axis=-1)
        return vals.argmin(axis=-1)

    def normal(self, points: np.ndarray, h: float = 1e-5) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        g = np.empty_like(p)
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            g[..., a] = (self.sdf(p + e) - self.sdf(p - e)) / (2 * h)
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        return g / np.maximum(n, 1e-12)

    def to_json(self) -> dict:
        return {
            "extent": [list(self.extent[0]), list(self.extent[1])],
            "primitives": [
                {"kind": pr.kind, "center": list(pr.center), "size": list(pr.size),
                 "color": list(pr.color)}
                for pr in self.primitives
            ],
        }

    @staticmethod
    def from_json(obj: dict) -> "SyntheticScene":
        prims = [
            Primitive(p["kind"], tuple(p["center"]), tuple(p["size"]), tuple(p["color"]))
            for p in obj["primitives"]
        ]
        lo, hi = obj["extent"]
        return SyntheticScene(prims, (tuple(lo), tuple(hi)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @staticmethod
    def load(path) -> "SyntheticScene":
        return SyntheticScene.from_json(json.loads(Path(path).read_text()))


def _tiled_wall(axis: int, plane: float, side: float, lo_u, hi_u, lo_v, hi_v,
                thickness: float, tile: float, base_color, alt_color):
    """A wall slab built from flush box tiles with alternating colors.

    ``axis`` is the wall normal axis; the wall surface sits at ``plane`` and
    the slab extends to ``plane + side * thickness``. Tiling gives the color
    image lateral structure while the union geometry stays an exact plane.
    """
    prims = []
    n_u = max(1, int(math.ceil((hi_u - lo_u) / tile)))
    n_v = max(1, int(math.ceil((hi_v - lo_v) / tile)))
    du = (hi_u - lo_u) / n_u
    dv = (hi_v - lo_v) / n_v
    u_axis, v_axis = [a for a in range(3) if a != axis]
    for i in range(n_u):
        for j in range(n_v):
            center = [0.0, 0.0, 0.0]
            center[axis] = plane + side * thickness / 2.0
            center[u_axis] = lo_u + (i + 0.5) * du
            center[v_axis] = lo_v + (j + 0.5) * dv
            half = [0.0, 0.0, 0.0]
            half[axis] = thickness / 2.0
            half[u_axis] = du / 2.0
            half[v_axis] = dv / 2.0
            # deterministic three-tone pattern
            k = (i + j) % 2 + ((i * 7 + j * 3) % 3 == 0)
            shade = (1.0, 0.72, 0.5)[k]
            color = tuple(min(1.0, c * shade + 0.05 * k) for c in
                          (base_color if (i + j) % 2 == 0 else alt_color))
            prims.append(Primitive("box", tuple(center), tuple(half), color))
    return prims


def make_room_scene(width: float = 6.0, depth: float = 4.0, height: float = 3.0,
                    wall: float = 0.3, furniture: bool = True,
                    tiled: bool = True, tile: float = 0.7) -> SyntheticScene:
    """A closed room built from wall slabs, optionally with contents.

    The interior spans [0, width] x [0, depth] x [0, height]; walls extend
    outward so the inside surfaces sit exactly on those planes. With
    ``tiled`` the walls are unions of flush colored tiles: same geometry,
    but the color image gains structure that constrains lateral motion.
    """
    w2, d2, h2 = width / 2, depth / 2, height / 2
    t = wall / 2
    if tiled:
        prims = []
        prims += _tiled_wall(2, 0.0, -1, -wall, width + wall, -wall, depth + wall,
                             wall, tile, (0.55, 0.52, 0.48), (0.72, 0.66, 0.55))
        prims += _tiled_wall(2, height, 1, 0.0, width, 0.0, depth,
                             wall, tile, (0.85, 0.85, 0.82), (0.7, 0.73, 0.78))
        prims += _tiled_wall(0, 0.0, -1, 0.0, depth, 0.0, height,
                             wall, tile, (0.75, 0.3, 0.28), (0.82, 0.52, 0.3))
        prims += _tiled_wall(0, width, 1, 0.0, depth, 0.0, height,
                             wall, tile, (0.3, 0.55, 0.75), (0.5, 0.42, 0.7))
        prims += _tiled_wall(1, 0.0, -1, 0.0, width, 0.0, height,
                             wall, tile, (0.32, 0.68, 0.35), (0.62, 0.68, 0.3))
        prims += _tiled_wall(1, depth, 1, 0.0, width, 0.0, height,
                             wall, tile, (0.8, 0.68, 0.25), (0.75, 0.5, 0.35))
    else:
        prims = [
            Primitive("box", (w2, d2, -t), (w2 + wall, d2 + wall, t), (0.55, 0.52, 0.48)),
            Primitive("box", (w2, d2, height + t), (w2 + wall, d2 + wall, t), (0.85, 0.85, 0.82)),
            Primitive("box", (-t, d2, h2), (t, d2 + wall, h2 + wall), (0.75, 0.3, 0.28)),
            Primitive("box", (width + t, d2, h2), (t, d2 + wall, h2 + wall), (0.3, 0.55, 0.75)),
            Primitive("box", (w2, -t, h2), (w2 + wall, t, h2 + wall), (0.32, 0.68, 0.35)),
            Primitive("box", (w2, depth + t, h2), (w2 + wall, t, h2 + wall), (0.8, 0.68, 0.25)),
        ]
    if furniture:
        prims.append(Primitive("box", (width * 0.72, depth * 0.3, 0.4),
                               (0.5, 0.35, 0.4), (0.55, 0.3, 0.6)))
        prims.append(Primitive("box", (width * 0.15, depth * 0.45, 0.95),
                               (0.25, 0.6, 0.12), (0.35, 0.42, 0.5)))
        prims.append(Primitive("sphere", (width * 0.3, depth * 0.7, 0.45),
                               (0.45, 0.0, 0.0), (0.9, 0.45, 0.15)))
    return SyntheticScene(prims, ((0.0, 0.0, 0.0), (width, depth, height)))


def make_corridor_scene(leg1: float = 8.0, leg2: float = 6.0, width: float = 2.5,
                        height: float = 2.5, wall: float = 0.3) -> SyntheticScene:
    """An L-shaped corridor: leg along +x, then a turn into +y."""
    t = wall / 2
    w = width
    prims = [
        # floor and ceiling over the L footprint (two overlapping slabs)
        Primitive("box", (leg1 / 2, w / 2, -t), (leg1 / 2 + wall, w / 2 + wall, t), (0.5, 0.5, 0.5)),
        Primitive("box", (leg1 - w / 2, leg2 / 2, -t), (w / 2 + wall, leg2 / 2 + wall, t), (0.5, 0.5, 0.5)),
        Primitive("box", (leg1 / 2, w / 2, height + t), (leg1 / 2 + wall, w / 2 + wall, t), (0.9, 0.9, 0.9)),
        Primitive("box", (leg1 - w / 2, leg2 / 2, height + t), (w / 2 + wall, leg2 / 2 + wall, t), (0.9, 0.9, 0.9)),
        # outer walls of leg 1
        Primitive("box", (leg1 / 2, -t, height / 2), (leg1 / 2 + wall, t, height / 2 + wall), (0.75, 0.35, 0.3)),
        Primitive("box", (-t, w / 2, height / 2), (t, w / 2 + wall, height / 2 + wall), (0.3, 0.45, 0.75)),
        # inner wall of leg 1 (stops where leg 2 begins)
        Primitive("box", ((leg1 - w) / 2, w + t, height / 2), ((leg1 - w) / 2 + wall, t, height / 2 + wall), (0.4, 0.7, 0.4)),
        # leg 2 walls
        Primitive("box", (leg1 + t, leg2 / 2, height / 2), (t, leg2 / 2 + wall, height / 2 + wall), (0.8, 0.7, 0.3)),
        Primitive("box", (leg1 - w - t, (leg2 + w) / 2, height / 2), (t, (leg2 - w) / 2 + wall, height / 2 + wall), (0.6, 0.35, 0.65)),
        # end caps
        Primitive("box", (leg1 - w / 2, leg2 + t, height / 2), (w / 2 + wall, t, height / 2 + wall), (0.85, 0.55, 0.25)),
    ]
    return SyntheticScene(prims, ((0.0, 0.0, 0.0), (leg1, leg2, height)))


def sphere_trace(scene: SyntheticScene, origins: np.ndarray, dirs_unit: np.ndarray,
                 t_max: float = 30.0, eps: float = SPHERE_TRACE_EPS,
                 max_steps: int = SPHERE_TRACE_STEPS):
    """March rays to the surface. Returns (t (n,), hit (n,) bool)."""
    n = len(dirs_unit)
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    alive = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        if not alive.any():
            break
        p = origins[alive] + t[alive, None] * dirs_unit[alive]
        d = scene.sdf(p)
        newly_hit = d < eps
        idx = np.nonzero(alive)[0]
        hit[idx[newly_hit]] = True
        t[idx] += np.maximum(d, 0.0)
        done = newly_hit | (t[idx] > t_max)
        alive[idx[done]] = False
    return t, hit


def render_view(scene: SyntheticScene, pose: Pose, k: Intrinsics):
    """Sphere-traced depth (z convention, 0 where no hit) and shaded color."""
    us, vs = np.meshgrid(np.arange(k.width), np.arange(k.height))
    us = us.ravel().astype(np.float64)
    vs = vs.ravel().astype(np.float64)
    d_cam = np.stack([(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us)], axis=1)
    norms = np.linalg.norm(d_cam, axis=1)
    dirs_world = (d_cam / norms[:, None]) @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs_world.shape)
    t, hit = sphere_trace(scene, origins, dirs_world)
    depth = np.zeros(k.height * k.width)
    depth[hit] = t[hit] / norms[hit]  # euclidean march distance -> z-depth
    color = np.zeros((k.height * k.width, 3))
    if hit.any():
        pts = origins[hit] + t[hit, None] * dirs_world[hit]
        prim_idx = scene.nearest_primitive(pts)
        albedo = np.array([scene.primitives[i].color for i in prim_idx])
        normals = scene.normal(pts)
        lam = np.clip(normals @ LIGHT_DIR, 0.0, 1.0)
        shade = 0.35 + 0.65 * lam
        color[hit] = np.clip(albedo * shade[:, None], 0.0, 1.0)
    return depth.reshape(k.height, k.width), color.reshape(k.height, k.width, 3)


def generate_synthetic(scene: SyntheticScene, trajectory: list[Pose], k: Intrinsics,
                       out_dir, depth_noise_sigma: float = 0.0, seed: int = 0,
                       fps: float = 30.0) -> Path:
    """Render a trajectory into a TUM-format sequence on disk."""
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i, pose in enumerate(trajectory):
        if scene.sdf(pose.translation.reshape(1, 3))[0] <= 0.05:
            raise DataError(f"trajectory pose {i} leaves free space")

    rgb_lines = ["# color images", "# timestamp filename"]
    depth_lines = ["# depth images", "# timestamp filename"]
    timestamps = []
    for i, pose in enumerate(trajectory):
        ts = i / fps
        timestamps.append(ts)
        depth, color = render_view(scene, pose, k)
        if depth_noise_sigma > 0.0:
            noise = rng.normal(0.0, depth_noise_sigma, size=depth.shape)
            depth = np.where(depth > 0, np.maximum(depth + noise, 0.0), 0.0)
        raw = np.round(depth * k.depth_scale).astype(np.uint16)
        rgb8 = np.round(color * 255.0).astype(np.uint8)
        name = f"{ts:.6f}.png"
        Image.fromarray(rgb8, mode="RGB").save(out / "rgb" / name)
        Image.fromarray(raw, mode="I;16").save(out / "depth" / name)
        rgb_lines.append(f"{ts:.6f} rgb/{name}")
        depth_lines.append(f"{ts:.6f} depth/{name}")

    (out / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (out / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    write_trajectory(trajectory, timestamps, out / "groundtruth.txt")
    scene.save(out / "scene.json")
    (out / "calibration.txt").write_text(
        f"{k.fx} {k.fy} {k.cx} {k.cy} {k.width} {k.height} {k.depth_scale}\n"
    )
    return out


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-from-camera pose with +z toward the target (right-handed)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # forward parallel to up; pick another hint
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd], axis=1)  # camera x right, y down, z forward
    return Pose(r, eye)


def orbit_trajectory(scene: SyntheticScene, n_frames: int, radius_frac: float = 0.3,
                     height_frac: float = 0.5, sweep: float = 2.0 * math.pi,
                     start_angle: float = 0.0, ease: bool = True) -> list[Pose]:
    """A smooth horizontal orbit inside the scene, looking outward.

    With ``ease`` the sweep follows a smoothstep profile so the camera starts
    and ends at rest; a constant-velocity motion model then sees only a small
    acceleration residual each frame, like a handheld recording.
    """
    lo = np.asarray(scene.extent[0])
    hi = np.asarray(scene.extent[1])
    center = (lo + hi) / 2.0
    radius = radius_frac * min(hi[0] - lo[0], hi[1] - lo[1])
    z = lo[2] + height_frac * (hi[2] - lo[2])
    poses = []
    for i in range(n_frames):
        s = i / max(n_frames - 1, 1)
        if ease:
            s = 0.5 * (1.0 - math.cos(math.pi * s))
        ang = start_angle + sweep * s
        eye = center + np.array([radius * math.cos(ang), radius * math.sin(ang), 0.0])
        eye[2] = z
        look = center + np.array([2.5 * radius * math.cos(ang + 1.2),
                                  2.5 * radius * math.sin(ang + 1.2), 0.0])
        look[2] = z - 0.15 * (hi[2] - lo[2])
        poses.append(look_at_pose(eye, look))
    return poses
