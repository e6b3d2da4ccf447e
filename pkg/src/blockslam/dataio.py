"""Configuration, dataset loading, and output writers.

The single interchange format is the TUM RGB-D layout: rgb.txt/depth.txt
listing timestamped images, optional groundtruth.txt, 16-bit depth PNGs at
``depth_scale`` units per meter. Trajectories are text lines
"timestamp tx ty tz qx qy qz qw" written with 17 significant digits so a
load/write round trip is exact to float precision.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .geometry import Intrinsics, Pose

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "BLOCKSLAM_DATA_ROOT"
ASSOCIATION_MAX_DT = 0.02  # seconds


def rng_for(seed: int, label: str) -> np.random.Generator:
    """A generator deterministically derived from the run seed and a label."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), zlib.crc32(label.encode("utf-8"))])
    )


@dataclass
class Config:
    """All tunable constants with their defaults.

    Profiles ("default", "tum", "scannet") override subsets; CLI overrides
    apply last. Unknown keys are rejected on load.
    """

    # allocation
    tau_th: float = 0.2
    block_size: float = 5.0
    n_alloc_samples: int = 1024
    # sampling
    n_t: int = 1024
    n_m: int = 2048
    n_a: int = 512
    n1: int = 32
    n2: int = 11
    near: float = 0.05
    far: float = 6.0
    truncation: float = 0.10
    render_bandwidth: float = 0.0  # 0 = auto: truncation^2 (normalized-SDF convention)
    # encoding
    levels: int = 16
    log2_table: int = 15
    features: int = 2
    res_min: int = 16
    voxel: float = 0.02
    oneblob_bins: int = 16
    # decoders
    mlp_width: int = 32
    mlp_layers: int = 2
    g_dim: int = 15
    # loss weights
    lambda_color: float = 5.0
    lambda_depth: float = 0.1
    lambda_sdf: float = 1000.0
    lambda_fs: float = 10.0
    lambda_smooth: float = 1e-6
    smooth_points: int = 256
    # learning rates
    lr_grids: float = 1e-2
    lr_decoders: float = 1e-2
    lr_poses: float = 1e-3
    lr_pose_tracking: float = 1e-3
    # schedule
    keyframe_every: int = 5
    map_every: int = 5
    iters_tracking: int = 10
    iters_mapping: int = 10
    iters_first: int = 200
    min_valid_rays: int = 10
    keep_fraction: float = 0.05
    # loop closure
    loop_enabled: bool = True
    loop_k: int = 10
    loop_adjacency: int = 20
    loop_n_corr: int = 256
    loop_iters: int = 30
    loop_lr: float = 1e-3
    loop_stage_iters: int = 50
    loop_min_corr: int = 20
    # run control
    seed: int = 0
    threads: int = 1
    data_dir: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = [
            "block_size", "n_alloc_samples", "n_t", "n_m", "n1", "near", "far",
            "truncation", "levels", "features", "res_min", "voxel",
            "oneblob_bins", "mlp_width", "mlp_layers", "g_dim", "keyframe_every",
            "map_every", "iters_tracking", "iters_mapping", "iters_first",
            "keep_fraction", "loop_k", "loop_adjacency", "loop_n_corr",
            "loop_iters", "loop_lr", "loop_stage_iters", "smooth_points",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.tau_th <= 1.0:
            raise ConfigError("tau_th must be in [0, 1]")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError("keep_fraction must be in (0, 1]")
        if self.near >= self.far:
            raise ConfigError("near must be less than far")
        if self.log2_table < 1 or self.log2_table > 30:
            raise ConfigError("log2_table out of range")
        if self.res_max < self.res_min:
            raise ConfigError("voxel too large: res_max below res_min")

    # -- derived quantities ------------------------------------------------
    @property
    def table_size(self) -> int:
        return 2 ** self.log2_table

    @property
    def res_max(self) -> int:
        return max(1, round(self.block_size / self.voxel))

    @property
    def encode_dim(self) -> int:
        return self.levels * self.features

    @property
    def smooth_eps(self) -> float:
        return self.block_size / self.res_max  # one cell of the finest level

    @property
    def render_band(self) -> float:
        """Sigmoid bandwidth for rendering weights.

        The losses supervise a metric SDF, but the weight curve follows the
        truncation-normalized convention of the SDF-rendering lineage: the
        sigmoid argument is s/tr with s itself measured in truncation units,
        i.e. s_metric / tr^2. Without this the free-space plateau at s = tr
        keeps weight 0.197 against the surface peak 0.25 and rendered depth
        smears across the whole covered ray segment.
        """
        return self.render_bandwidth if self.render_bandwidth > 0 else self.truncation ** 2

    def items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


PROFILES: dict[str, dict[str, object]] = {
    "default": {},
    "tum": {"lr_pose_tracking": 1e-2, "truncation": 0.05, "iters_mapping": 20},
    "scannet": {"n1": 96, "n2": 21},
}


def _coerce(name: str, kind: type, raw: str):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError as e:
        raise ConfigError(f"cannot parse {name}={raw!r} as {kind.__name__}") from e


def _field_types() -> dict[str, type]:
    return {f.name: f.type if isinstance(f.type, type) else eval(f.type)  # noqa: S307
            for f in fields(Config)}


def parse_overrides(pairs: list[str]) -> dict[str, object]:
    """key=value strings -> typed config values (unknown keys rejected)."""
    types = _field_types()
    out: dict[str, object] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, types[key], raw)
    return out


def load_config(path=None, profile: str = "default",
                overrides: dict[str, object] | None = None) -> Config:
    """Defaults, then [default] section, then the profile section, then
    explicit overrides."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    types = _field_types()
    values: dict[str, object] = dict(PROFILES["default"])

    file_sections: dict[str, dict[str, object]] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        section = "default"
        for ln, line in enumerate(p.read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                file_sections.setdefault(section, {})
                continue
            if "=" not in line:
                raise ConfigError(f"{p}:{ln}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{p}:{ln}: unknown config key {key!r}")
            file_sections.setdefault(section, {})[key] = _coerce(key, types[key], raw)

    values.update(file_sections.get("default", {}))
    values.update(PROFILES[profile])
    values.update(file_sections.get(profile, {}) if profile != "default" else {})
    values.update(overrides or {})
    return Config(**values)


class Frame:
    """One timestamped RGB-D frame, images loaded lazily from disk."""

    def __init__(self, index: int, timestamp: float, rgb_path: Path,
                 depth_path: Path, depth_scale: float):
        self.index = index
        self.timestamp = timestamp
        self.rgb_path = Path(rgb_path)
        self.depth_path = Path(depth_path)
        self.depth_scale = depth_scale
        self._color = None
        self._depth = None

    @property
    def color(self) -> np.ndarray:
        if self._color is None:
            try:
                img = Image.open(self.rgb_path).convert("RGB")
            except OSError as e:
                raise DataError(f"frame {self.index}: cannot read {self.rgb_path}: {e}") from e
            self._color = np.asarray(img, dtype=np.float64) / 255.0
        return self._color

    @property
    def depth(self) -> np.ndarray:
        if self._depth is None:
            try:
                img = Image.open(self.depth_path)
            except OSError as e:
                raise DataError(f"frame {self.index}: cannot read {self.depth_path}: {e}") from e
            raw = np.asarray(img, dtype=np.float64)
            if raw.ndim != 2:
                raise DataError(f"frame {self.index}: depth image is not single-channel")
            self._depth = raw / self.depth_scale
        return self._depth

    def drop_cache(self) -> None:
        self._color = None
        self._depth = None


@dataclass
class Sequence:
    frames: list[Frame]
    intrinsics: Intrinsics
    groundtruth: "list[tuple[float, Pose]] | None"
    root: Path

    def __len__(self) -> int:
        return len(self.frames)


def _read_file_list(path: Path) -> list[tuple[float, str]]:
    if not path.exists():
        raise DataError(f"missing file: {path}")
    out = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise DataError(f"{path}:{ln}: expected 'timestamp filename'")
        try:
            ts = float(parts[0])
        except ValueError as e:
            raise DataError(f"{path}:{ln}: bad timestamp {parts[0]!r}") from e
        out.append((ts, parts[1]))
    return out


def associate(times_a: list[float], times_b: list[float],
              max_dt: float = ASSOCIATION_MAX_DT) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp one-to-one association within max_dt."""
    candidates = [
        (abs(ta - tb), i, j)
        for i, ta in enumerate(times_a)
        for j, tb in enumerate(times_b)
        if abs(ta - tb) <= max_dt
    ]
    candidates.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    pairs = []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def load_calibration(root: Path) -> Intrinsics:
    path = root / "calibration.txt"
    if not path.exists():
        raise DataError(f"missing calibration file: {path}")
    parts = path.read_text().split()
    if len(parts) != 7:
        raise DataError(f"{path}: expected 'fx fy cx cy width height depth_scale'")
    fx, fy, cx, cy = map(float, parts[:4])
    width, height = int(parts[4]), int(parts[5])
    return Intrinsics(fx, fy, cx, cy, width, height, float(parts[6]))


def resolve_data_dir(path_str: str) -> Path:
    root = os.environ.get(DATA_ROOT_ENV)
    p = Path(path_str)
    if not p.is_absolute() and root:
        return Path(root) / p
    return p


def load_tum(directory, intrinsics: Intrinsics | None = None) -> Sequence:
    """Load a TUM-layout sequence: associated frames in timestamp order."""
    root = Path(directory)
    rgb = _read_file_list(root / "rgb.txt")
    depth = _read_file_list(root / "depth.txt")
    if intrinsics is None:
        intrinsics = load_calibration(root)
    pairs = associate([t for t, _ in rgb], [t for t, _ in depth])
    if len(pairs) < len(rgb):
        log.warning(
            "dropped %d color frames without a depth match within %.3fs",
            len(rgb) - len(pairs), ASSOCIATION_MAX_DT,
        )
    frames = []
    for idx, (i, j) in enumerate(pairs):
        frames.append(Frame(
            index=idx,
            timestamp=rgb[i][0],
            rgb_path=root / rgb[i][1],
            depth_path=root / depth[j][1],
            depth_scale=intrinsics.depth_scale,
        ))
    gt = None
    gt_path = root / "groundtruth.txt"
    if gt_path.exists():
        gt = load_trajectory(gt_path)
    return Sequence(frames=frames, intrinsics=intrinsics, groundtruth=gt, root=root)


# -- trajectories ---------------------------------------------------------

def rotation_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Rotation matrix -> (qx, qy, qz, qw), qw >= 0."""
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        qw = 0.25 * s
        qx = (r[2, 1] - r[1, 2]) / s
        qy = (r[0, 2] - r[2, 0]) / s
        qz = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        qw = (r[2, 1] - r[1, 2]) / s
        qx = 0.25 * s
        qy = (r[0, 1] + r[1, 0]) / s
        qz = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        qw = (r[0, 2] - r[2, 0]) / s
        qx = (r[0, 1] + r[1, 0]) / s
        qy = 0.25 * s
        qz = (r[1, 2] + r[2, 1]) / s
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        qw = (r[1, 0] - r[0, 1]) / s
        qx = (r[0, 2] + r[2, 0]) / s
        qy = (r[1, 2] + r[2, 1]) / s
        qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    if qw < 0:
        q = -q
    return q / np.linalg.norm(q)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    qx, qy, qz, qw = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
        [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
        [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
    ])


def write_trajectory(poses: list[Pose], timestamps: list[float], path) -> None:
    """TUM trajectory lines with 17 significant digits."""
    lines = []
    for ts, pose in zip(timestamps, poses):
        q = rotation_to_quaternion(pose.rotation)
        t = pose.translation
        vals = [t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
        lines.append(f"{ts:.6f} " + " ".join(f"{v:.17g}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path) -> list[tuple[float, Pose]]:
    out = []
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing trajectory file: {p}")
    for ln, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DataError(f"{p}:{ln}: expected 8 fields")
        try:
            vals = [float(x) for x in parts]
        except ValueError as e:
            raise DataError(f"{p}:{ln}: unparsable number") from e
        ts, tx, ty, tz, qx, qy, qz, qw = vals
        # orthonormalize against text-precision drift before Pose validation
        r = quaternion_to_rotation(np.array([qx, qy, qz, qw]))
        u, _, vt = np.linalg.svd(r)
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] = -u[:, -1]
            r = u @ vt
        out.append((ts, Pose(r, np.array([tx, ty, tz]))))
    return out


# -- meshes and logs -------------------------------------------------------

def write_mesh_ply(mesh, path) -> None:
    """Binary little-endian PLY with optional per-vertex uchar colors."""
    verts = np.asarray(mesh.vertices, dtype=np.float32)
    faces = np.asarray(mesh.faces, dtype=np.int32)
    colors = getattr(mesh, "colors", None)
    has_color = colors is not None and len(colors)
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(verts)}",
              "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {len(faces)}",
               "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if has_color:
            c8 = np.clip(np.asarray(colors) * 255.0, 0, 255).astype(np.uint8)
            for v, c in zip(verts, c8):
                fh.write(struct.pack("<fff", *v) + struct.pack("<BBB", *c))
        else:
            fh.write(verts.astype("<f4").tobytes())
        for f in faces:
            fh.write(struct.pack("<B", 3) + struct.pack("<iii", *f))


def load_mesh_ply(path):
    """Read a binary little-endian PLY written by write_mesh_ply."""
    from .evaluation import Mesh

    data = Path(path).read_bytes()
    marker = b"end_header\n"
    pos = data.find(marker)
    if not data.startswith(b"ply") or pos < 0:
        raise DataError(f"{path}: not a PLY file")
    header = data[:pos].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise DataError(f"{path}: only binary little-endian PLY is supported")
    n_vert = n_face = 0
    has_color = False
    for line in header:
        if line.startswith("element vertex"):
            n_vert = int(line.split()[-1])
        elif line.startswith("element face"):
            n_face = int(line.split()[-1])
        elif line == "property uchar red":
            has_color = True
    off = pos + len(marker)
    stride = 12 + (3 if has_color else 0)
    verts = np.empty((n_vert, 3))
    colors = np.empty((n_vert, 3)) if has_color else None
    for i in range(n_vert):
        verts[i] = struct.unpack_from("<fff", data, off)
        if has_color:
            colors[i] = np.frombuffer(data[off + 12:off + 15], dtype=np.uint8) / 255.0
        off += stride
    faces = np.empty((n_face, 3), dtype=np.int64)
    for i in range(n_face):
        if data[off] != 3:
            raise DataError(f"{path}: non-triangle face")
        faces[i] = struct.unpack_from("<iii", data, off + 1)
        off += 13
    return Mesh(verts, faces, colors)


def write_runlog_csv(records: list[dict], path, config_items=None) -> None:
    """Per-frame run log; the resolved config is embedded as '#' comments."""
    lines = []
    if config_items:
        for key, value in config_items:
            lines.append(f"# {key} = {value}")
    if records:
        keys = list(records[0].keys())
        lines.append(",".join(keys))
        for rec in records:
            lines.append(",".join(_csv_cell(rec[k]) for k in keys))
    Path(path).write_text("\n".join(lines) + "\n")


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)
