"""Numba-compiled kernels for the encoding hot paths.

Each kernel has a vectorized numpy twin in ``encoders.py``; the two paths are
parity-tested. Kernels are single-threaded on purpose: scatter accumulation
stays deterministic and runs are bit-reproducible.
"""

import math

import numpy as np
from numba import njit

PRIME_Y = np.uint64(2654435761)
PRIME_Z = np.uint64(805459861)


@njit(cache=True)
def hash_encode_fwd(table, x, scales, res, dense, t_size, out, idx_out, frac_out):
    n = x.shape[0]
    levels = scales.shape[0]
    fdim = table.shape[1]
    mask = np.uint64(t_size - 1)
    for i in range(n):
        for l in range(levels):
            s = scales[l]
            r = res[l]
            zx = x[i, 0] * s
            zy = x[i, 1] * s
            zz = x[i, 2] * s
            ix = int(zx)
            iy = int(zy)
            iz = int(zz)
            if ix > r - 1:
                ix = r - 1
            if iy > r - 1:
                iy = r - 1
            if iz > r - 1:
                iz = r - 1
            fx = zx - ix
            fy = zy - iy
            fz = zz - iz
            frac_out[i, l, 0] = fx
            frac_out[i, l, 1] = fy
            frac_out[i, l, 2] = fz
            base = l * t_size
            edge = r + 1
            for c in range(8):
                bx = (c >> 2) & 1
                by = (c >> 1) & 1
                bz = c & 1
                vx = ix + bx
                vy = iy + by
                vz = iz + bz
                if dense[l]:
                    row = base + vx + edge * (vy + edge * vz)
                else:
                    hv = (
                        np.uint64(vx) ^ (np.uint64(vy) * PRIME_Y) ^ (np.uint64(vz) * PRIME_Z)
                    ) & mask
                    row = base + np.int64(hv)
                idx_out[i, l, c] = row
                wx = fx if bx else 1.0 - fx
                wy = fy if by else 1.0 - fy
                wz = fz if bz else 1.0 - fz
                w = wx * wy * wz
                for f in range(fdim):
                    out[i, l * fdim + f] += w * table[row, f]


@njit(cache=True)
def hash_encode_bwd(
    gout, table, idx, frac, scales, need_table, need_x, grad_table, grad_x
):
    n = gout.shape[0]
    levels = scales.shape[0]
    fdim = table.shape[1]
    for i in range(n):
        for l in range(levels):
            fx = frac[i, l, 0]
            fy = frac[i, l, 1]
            fz = frac[i, l, 2]
            gx = 0.0
            gy = 0.0
            gz = 0.0
            for c in range(8):
                bx = (c >> 2) & 1
                by = (c >> 1) & 1
                bz = c & 1
                wx = fx if bx else 1.0 - fx
                wy = fy if by else 1.0 - fy
                wz = fz if bz else 1.0 - fz
                sx = 1.0 if bx else -1.0
                sy = 1.0 if by else -1.0
                sz = 1.0 if bz else -1.0
                w = wx * wy * wz
                row = idx[i, l, c]
                dot = 0.0
                for f in range(fdim):
                    go = gout[i, l * fdim + f]
                    if need_table:
                        grad_table[row, f] += w * go
                    dot += go * table[row, f]
                if need_x:
                    gx += sx * wy * wz * dot
                    gy += wx * sy * wz * dot
                    gz += wx * wy * sz * dot
            if need_x:
                s = scales[l]
                grad_x[i, 0] += gx * s
                grad_x[i, 1] += gy * s
                grad_x[i, 2] += gz * s


@njit(cache=True)
def oneblob_fwd(x, bins, block_size, out):
    n = x.shape[0]
    inv_b = 1.0 / block_size
    half_k2 = 0.5 * bins * bins
    for i in range(n):
        for a in range(3):
            t = (x[i, a] % block_size) * inv_b
            for k in range(bins):
                d = t - (k + 0.5) / bins
                d -= math.floor(d + 0.5)
                out[i, a * bins + k] = math.exp(-d * d * half_k2)


@njit(cache=True)
def oneblob_bwd(gout, out, x, bins, block_size, grad_x):
    n = x.shape[0]
    inv_b = 1.0 / block_size
    k2 = float(bins * bins)
    for i in range(n):
        for a in range(3):
            t = (x[i, a] % block_size) * inv_b
            acc = 0.0
            for k in range(bins):
                d = t - (k + 0.5) / bins
                d -= math.floor(d + 0.5)
                acc += gout[i, a * bins + k] * out[i, a * bins + k] * (-d * k2)
            grad_x[i, a] += acc * inv_b
