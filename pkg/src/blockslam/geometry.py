"""SE(3) poses, pinhole camera model, rays, projection, and frustum tests.

Conventions used throughout the package:

* Poses are world-from-camera: ``x_world = R @ x_cam + t``.
* Ray directions are NOT normalized. A ray through pixel (u, v) has
  direction ``R @ K^-1 @ [u, v, 1]`` so the sample parameter d in
  ``x = o + d * r`` is the camera-frame z-depth. Rendered depths are then
  directly comparable to sensor depth images.
* Tangent vectors are 6-vectors ``[rho, omega]`` (translation part first).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InvalidDepthError

# Below this angle (radians) Rodrigues coefficients switch to Taylor series.
SMALL_ANGLE = 1e-8


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0  # depth-image units per meter

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolation("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractViolation("principal point must lie inside the image")

    def k_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def _check_rotation(r: np.ndarray) -> None:
    if r.shape != (3, 3):
        raise ContractViolation(f"rotation must be 3x3, got {r.shape}")
    if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
        raise ContractViolation("rotation is not orthonormal within 1e-9")
    if abs(np.linalg.det(r) - 1.0) > 1e-9:
        raise ContractViolation("rotation determinant is not +1 within 1e-9")


@dataclass(frozen=True)
class Pose:
    """Rigid transform in SE(3), world-from-camera."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(r)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a batch (n, 3) into the world frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class Ray:
    """Ray origin and (unnormalized, z-depth scaled) direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(d)) or np.all(d == 0.0):
            raise ContractViolation("ray direction must be finite and nonzero")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, d) -> np.ndarray:
        return self.origin + np.multiply.outer(np.asarray(d), self.direction)


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def _rodrigues_coeffs(theta: float) -> tuple[float, float, float]:
    """Coefficients (a, b, d) with R = I + a*W + b*W^2 and V = I + b*W + d*W^2."""
    if theta < SMALL_ANGLE:
        u = theta * theta
        a = 1.0 - u / 6.0 + u * u / 120.0
        b = 0.5 - u / 24.0 + u * u / 720.0
        d = 1.0 / 6.0 - u / 120.0 + u * u / 5040.0
    else:
        u = theta * theta
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / u
        d = (theta - math.sin(theta)) / (u * theta)
    return a, b, d


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(omega))
    a, b, _ = _rodrigues_coeffs(theta)
    w = _skew(omega)
    return np.eye(3) + a * w + b * (w @ w)


def so3_log(r: np.ndarray) -> np.ndarray:
    cos_angle = min(1.0, max(-1.0, 0.5 * (np.trace(r) - 1.0)))
    theta = math.acos(cos_angle)
    if theta < SMALL_ANGLE:
        return 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if math.pi - theta < 1e-6:
        # Near pi the antisymmetric part vanishes; recover the axis from the
        # symmetric part instead.
        s = 0.5 * (r + r.T)
        diag = np.diag(s)
        k = int(np.argmax(diag))
        axis = np.zeros(3)
        axis[k] = math.sqrt(max(0.0, (diag[k] + 1.0) * 0.5))
        for j in range(3):
            if j != k:
                axis[j] = s[k, j] / (2.0 * axis[k])
        # Fix the sign using the antisymmetric part when it is not exactly zero.
        anti = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        if np.dot(anti, axis) < 0.0:
            axis = -axis
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    scale = theta / (2.0 * math.sin(theta))
    return scale * np.array(
        [r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]
    )


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map from a tangent 6-vector [rho, omega] to a Pose."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise ContractViolation("tangent increment must be finite")
    rho, omega = xi[:3], xi[3:]
    theta = float(np.linalg.norm(omega))
    a, b, d = _rodrigues_coeffs(theta)
    w = _skew(omega)
    w2 = w @ w
    r = np.eye(3) + a * w + b * w2
    v = np.eye(3) + b * w + d * w2
    return Pose(r, v @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    """Logarithm map; inverse of se3_exp for rotation angles below pi."""
    omega = so3_log(pose.rotation)
    theta = float(np.linalg.norm(omega))
    w = _skew(omega)
    w2 = w @ w
    if theta < SMALL_ANGLE:
        u = theta * theta
        v_inv = np.eye(3) - 0.5 * w + (1.0 / 12.0 + u / 720.0) * w2
    else:
        u = theta * theta
        coeff = (1.0 - (theta * math.sin(theta)) / (2.0 * (1.0 - math.cos(theta)))) / u
        v_inv = np.eye(3) - 0.5 * w + coeff * w2
    rho = v_inv @ pose.translation
    return np.concatenate([rho, omega])


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation)


def generate_ray(pose: Pose, k: Intrinsics, u: float, v: float) -> Ray:
    """Ray through pixel (u, v); direction scaled so d equals z-depth."""
    if not (0 <= u < k.width and 0 <= v < k.height):
        raise ContractViolation(f"pixel ({u}, {v}) outside {k.width}x{k.height} image")
    d_cam = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    return Ray(pose.translation.copy(), pose.rotation @ d_cam)


def generate_rays(pose: Pose, k: Intrinsics, us: np.ndarray, vs: np.ndarray):
    """Vectorized ray generation. Returns (origin (3,), directions (n, 3))."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    d_cam = np.stack(
        [(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us)], axis=-1
    )
    return pose.translation.copy(), d_cam @ pose.rotation.T


def backproject(pose: Pose, k: Intrinsics, u: float, v: float, depth: float) -> np.ndarray:
    """Lift pixel (u, v) at z-depth ``depth`` (meters) to a world point."""
    if depth <= 0.0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    p_cam = depth * np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    return pose.apply(p_cam)


def backproject_pixels(
    pose: Pose, k: Intrinsics, us: np.ndarray, vs: np.ndarray, depths: np.ndarray
) -> np.ndarray:
    """Vectorized backprojection of (n,) pixel arrays to (n, 3) world points."""
    depths = np.asarray(depths, dtype=np.float64)
    if np.any(depths <= 0.0):
        raise InvalidDepthError("all depths must be positive")
    origin, dirs = generate_rays(pose, k, us, vs)
    return origin + depths[:, None] * dirs


def project(pose: Pose, k: Intrinsics, p_world: np.ndarray):
    """Project a world point. Returns (u, v, depth) or None if behind camera."""
    p = np.asarray(p_world, dtype=np.float64).reshape(3)
    q = pose.rotation.T @ (p - pose.translation)
    z = q[2]
    if z <= 0.0:
        return None
    return (k.fx * q[0] / z + k.cx, k.fy * q[1] / z + k.cy, z)


def project_points(pose: Pose, k: Intrinsics, points: np.ndarray):
    """Vectorized projection.

    Returns (uv (n, 2), z (n,), in_front (n,) bool). Pixel coordinates for
    points with z <= 0 are filled with NaN.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = (p - pose.translation) @ pose.rotation
    z = q[:, 2]
    in_front = z > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * q[:, 0] / z + k.cx
        v = k.fy * q[:, 1] / z + k.cy
    uv = np.stack([u, v], axis=1)
    uv[~in_front] = np.nan
    return uv, z, in_front


def frustum_contains(
    pose: Pose, k: Intrinsics, p_world: np.ndarray, near: float, far: float
) -> bool:
    """True iff the point projects inside the image and z is in [near, far]."""
    if not near < far:
        raise ContractViolation("near must be less than far")
    res = project(pose, k, p_world)
    if res is None:
        return False
    u, v, z = res
    return (
        0.0 <= u <= k.width - 1
        and 0.0 <= v <= k.height - 1
        and near <= z <= far
    )


def frustum_vertices(pose: Pose, k: Intrinsics, near: float, far: float) -> np.ndarray:
    """The 8 corner points of the viewing frustum in world coordinates."""
    corners_uv = [(0.0, 0.0), (k.width - 1.0, 0.0), (0.0, k.height - 1.0), (k.width - 1.0, k.height - 1.0)]
    pts = []
    for u, v in corners_uv:
        d = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
        for z in (near, far):
            pts.append(z * d)
    return pose.apply(np.array(pts))


def frustum_planes(pose: Pose, k: Intrinsics, near: float, far: float):
    """Inward-facing frustum planes as (normals (6, 3), offsets (6,)).

    A point p is inside iff ``normals @ p + offsets >= 0`` for all rows.
    """
    # Camera-frame inward normals for the 4 side planes through the origin.
    # Left plane passes through rays with u = 0: x/z = (0 - cx)/fx.
    lo_x = (0.0 - k.cx) / k.fx
    hi_x = (k.width - 1.0 - k.cx) / k.fx
    lo_y = (0.0 - k.cy) / k.fy
    hi_y = (k.height - 1.0 - k.cy) / k.fy
    normals_cam = [
        np.array([1.0, 0.0, -lo_x]),   # x/z >= lo_x
        np.array([-1.0, 0.0, hi_x]),   # x/z <= hi_x
        np.array([0.0, 1.0, -lo_y]),
        np.array([0.0, -1.0, hi_y]),
        np.array([0.0, 0.0, 1.0]),     # z >= near
        np.array([0.0, 0.0, -1.0]),    # z <= far
    ]
    points_cam = [np.zeros(3)] * 4 + [np.array([0.0, 0.0, near]), np.array([0.0, 0.0, far])]
    normals = np.array([pose.rotation @ n for n in normals_cam])
    points = np.array([pose.apply(p) for p in points_cam])
    offsets = -np.einsum("ij,ij->i", normals, points)
    return normals, offsets
