"""Differentiable application of SE(3) tangent increments.

Pose optimization works on a 6-vector increment xi = [rho, omega] applied by
left multiplication onto a fixed base pose: T = exp(xi) * base. This module
expresses that map with tape primitives so gradients flow from rendered rays
back into xi. The Rodrigues coefficients are even functions of the rotation
angle, computed from u = |omega|^2 with a Taylor branch near zero so the
chain stays differentiable at xi = 0 (where every tracking iteration starts).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Pose, compose, se3_exp

_SMALL_U = 1e-16  # switch to series below this |omega|^2


def exp_coeffs(omega: Tensor):
    """Rodrigues coefficients (a, b, d) as scalar tensors.

    R = I + a*W + b*W^2 and the translation mixer V = I + b*W + d*W^2,
    where W is the skew matrix of omega.
    """
    u = ad.sum_(ad.square(omega))
    if float(u.data) < _SMALL_U:
        u2 = ad.square(u)
        a = 1.0 - u * (1.0 / 6.0) + u2 * (1.0 / 120.0)
        b = 0.5 - u * (1.0 / 24.0) + u2 * (1.0 / 720.0)
        d = (1.0 / 6.0) - u * (1.0 / 120.0) + u2 * (1.0 / 5040.0)
    else:
        theta = ad.sqrt(u)
        a = ad.sin(theta) / theta
        b = (1.0 - ad.cos(theta)) / u
        d = (theta - ad.sin(theta)) / (u * theta)
    return a, b, d


def cross(omega: Tensor, v: Tensor) -> Tensor:
    """omega x v for omega (3,) and v (n, 3), both on the tape."""
    wx, wy, wz = omega[0], omega[1], omega[2]
    vx, vy, vz = v[:, 0], v[:, 1], v[:, 2]
    return ad.stack([wy * vz - wz * vy, wz * vx - wx * vz, wx * vy - wy * vx], axis=1)


def rotate(omega: Tensor, a: Tensor, b: Tensor, v: Tensor) -> Tensor:
    """exp(W) @ v rows via v + a*(w x v) + b*(w x (w x v))."""
    single = v.data.ndim == 1
    if single:
        v = v.reshape(1, 3)
    c1 = cross(omega, v)
    c2 = cross(omega, c1)
    out = v + a * c1 + b * c2
    return out.reshape(3) if single else out


def rotate_inv(omega: Tensor, a: Tensor, b: Tensor, v: Tensor) -> Tensor:
    """exp(W)^T @ v rows (transpose flips the sign of the odd term)."""
    single = v.data.ndim == 1
    if single:
        v = v.reshape(1, 3)
    c1 = cross(omega, v)
    c2 = cross(omega, c1)
    out = v - a * c1 + b * c2
    return out.reshape(3) if single else out


def _split(xi: Tensor):
    rho = xi[0:3]
    omega = xi[3:6]
    return rho, omega


def increment_translation(xi: Tensor):
    """Translation of exp(xi): V @ rho, plus the rotation coefficients."""
    rho, omega = _split(xi)
    a, b, d = exp_coeffs(omega)
    t = rotate(omega, b, d, rho)  # rho + b*(w x rho) + d*(w x (w x rho)) = V rho
    return t, omega, a, b


def apply_increment_points(xi: Tensor, base: Pose, points) -> Tensor:
    """(exp(xi) * base) applied to points (n, 3); differentiable in xi."""
    pts = points if isinstance(points, Tensor) else ad.constant(points)
    base_pts = ad.constant(np.asarray(pts.data) @ base.rotation.T + base.translation) \
        if not pts.requires_grad else ad.matmul(pts, ad.constant(base.rotation.T)) + ad.constant(base.translation)
    t_xi, omega, a, b = increment_translation(xi)
    return rotate(omega, a, b, base_pts) + t_xi


def apply_increment_rays(xi: Tensor, base: Pose, dirs_cam: np.ndarray):
    """Ray origin and directions of the pose exp(xi) * base.

    ``dirs_cam`` are camera-frame directions K^-1 [u, v, 1] (constants).
    Returns (origin (3,) Tensor, dirs (n, 3) Tensor).
    """
    t_xi, omega, a, b = increment_translation(xi)
    origin = rotate(omega, a, b, ad.constant(base.translation)) + t_xi
    dirs_base = dirs_cam @ base.rotation.T
    dirs = rotate(omega, a, b, ad.constant(dirs_base))
    return origin, dirs


def apply_increment_inverse_points(xi: Tensor, base: Pose, points) -> Tensor:
    """(exp(xi) * base)^-1 applied to points (n, 3); differentiable in xi."""
    pts = points if isinstance(points, Tensor) else ad.constant(points)
    t_xi, omega, a, b = increment_translation(xi)
    q = rotate_inv(omega, a, b, pts - t_xi)          # exp(W)^T (x - t)
    rt = ad.constant(base.rotation)                   # base^-1: R^T (q - t_base)
    return ad.matmul(q - ad.constant(base.translation), rt)


def bake(xi_value: np.ndarray, base: Pose) -> Pose:
    """Fold an increment's current value into the base pose."""
    return compose(se3_exp(xi_value), base)
