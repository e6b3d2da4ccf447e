"""Multi-resolution hash encoding per block and one-blob coordinate encoding.

Both encoders are differentiable tape operations: the hash encoder w.r.t. its
feature tables and the query position, the one-blob encoder w.r.t. position
only (it has no learnable state).

A numba fast path is used when available; set BLOCKSLAM_NO_NUMBA=1 to force
the pure-numpy twin (the two are parity-tested).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractViolation

if os.environ.get("BLOCKSLAM_NO_NUMBA"):
    _K = None
else:
    try:
        from . import _kernels as _K
    except ImportError:  # pragma: no cover - numba missing entirely
        _K = None

PRIME_Y = np.uint64(2654435761)
PRIME_Z = np.uint64(805459861)

# Corner c of a cell, c in 0..7, has offsets ((c>>2)&1, (c>>1)&1, c&1).
_CORNERS = np.array(
    [[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.int64
)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int
    table_size: int
    features: int
    res_min: int
    res_max: int
    block_size: float

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ConfigError("table_size must be a power of two")
        if self.res_min > self.res_max:
            raise ConfigError("res_min must not exceed res_max")
        if self.features < 1:
            raise ConfigError("features must be >= 1")
        if self.block_size <= 0:
            raise ConfigError("block_size must be positive")


def level_resolutions(config: HashGridConfig) -> list[int]:
    """Per-level cell counts R_l = floor(res_min * b^l), geometric in l."""
    if config.levels == 1:
        return [config.res_min]
    step = (math.log(config.res_max) - math.log(config.res_min)) / (config.levels - 1)
    # Guard the floor against 1-ulp dips below exact integer endpoints.
    return [
        int(math.floor(config.res_min * math.exp(l * step) + 1e-9))
        for l in range(config.levels)
    ]


def hash_index(vertex, resolution: int, table_size: int):
    """Table index for integer grid vertex coordinates at one level.

    Collision-free row-major indexing while the level's vertex lattice fits in
    the table; the three-prime XOR hash beyond that.
    """
    v = np.asarray(vertex, dtype=np.int64)
    edge = resolution + 1
    if edge**3 <= table_size:
        return v[..., 0] + edge * (v[..., 1] + edge * v[..., 2])
    h = (
        v[..., 0].astype(np.uint64)
        ^ (v[..., 1].astype(np.uint64) * PRIME_Y)
        ^ (v[..., 2].astype(np.uint64) * PRIME_Z)
    ) & np.uint64(table_size - 1)
    return h.astype(np.int64)


def init_table(config: HashGridConfig, rng: np.random.Generator) -> np.ndarray:
    """Fresh feature table, one (table_size, F) slab per level, stacked flat."""
    rows = config.levels * config.table_size
    return rng.uniform(-1e-4, 1e-4, size=(rows, config.features))


class HashGrid:
    """Learnable multi-resolution feature grid for one block."""

    def __init__(self, config: HashGridConfig, table: Tensor):
        expected = (config.levels * config.table_size, config.features)
        if table.data.shape != expected:
            raise ConfigError(f"table shape {table.data.shape} != {expected}")
        self.config = config
        self.table = table
        self.resolutions = np.array(level_resolutions(config), dtype=np.int64)
        self.dense = np.array(
            [(r + 1) ** 3 <= config.table_size for r in self.resolutions]
        )
        self.scales = self.resolutions.astype(np.float64) / config.block_size

    @property
    def out_dim(self) -> int:
        return self.config.levels * self.config.features


def _encode_fwd_np(grid: HashGrid, x: np.ndarray):
    cfg = grid.config
    n = x.shape[0]
    levels, fdim, t_size = cfg.levels, cfg.features, cfg.table_size
    z = x[:, None, :] * grid.scales[None, :, None]  # (n, L, 3)
    i0 = np.minimum(z.astype(np.int64), grid.resolutions[None, :, None] - 1)
    frac = z - i0
    corner = i0[:, :, None, :] + _CORNERS[None, None, :, :]  # (n, L, 8, 3)
    idx = np.empty((n, levels, 8), dtype=np.int64)
    for l in range(levels):
        idx[:, l] = hash_index(corner[:, l], int(grid.resolutions[l]), t_size) + l * t_size
    wx = np.where(_CORNERS[None, None, :, 0], frac[:, :, None, 0], 1.0 - frac[:, :, None, 0])
    wy = np.where(_CORNERS[None, None, :, 1], frac[:, :, None, 1], 1.0 - frac[:, :, None, 1])
    wz = np.where(_CORNERS[None, None, :, 2], frac[:, :, None, 2], 1.0 - frac[:, :, None, 2])
    w = wx * wy * wz  # (n, L, 8)
    feats = grid.table.data[idx]  # (n, L, 8, F)
    out = np.einsum("nlc,nlcf->nlf", w, feats).reshape(n, levels * fdim)
    return out, idx, frac


def _encode_bwd_np(grid: HashGrid, gout, idx, frac, need_table, need_x):
    cfg = grid.config
    n = gout.shape[0]
    levels, fdim = cfg.levels, cfg.features
    g = gout.reshape(n, levels, fdim)
    wx = np.where(_CORNERS[None, None, :, 0], frac[:, :, None, 0], 1.0 - frac[:, :, None, 0])
    wy = np.where(_CORNERS[None, None, :, 1], frac[:, :, None, 1], 1.0 - frac[:, :, None, 1])
    wz = np.where(_CORNERS[None, None, :, 2], frac[:, :, None, 2], 1.0 - frac[:, :, None, 2])
    w = wx * wy * wz
    grad_table = None
    grad_x = None
    if need_table:
        rows = grid.table.data.shape[0]
        contrib = np.einsum("nlc,nlf->nlcf", w, g)
        grad_table = np.empty((rows, fdim))
        flat_idx = idx.ravel()
        flat = contrib.reshape(-1, fdim)
        for f in range(fdim):
            grad_table[:, f] = np.bincount(flat_idx, weights=flat[:, f], minlength=rows)
    if need_x:
        feats = grid.table.data[idx]
        dot = np.einsum("nlf,nlcf->nlc", g, feats)
        sx = np.where(_CORNERS[None, None, :, 0], 1.0, -1.0)
        sy = np.where(_CORNERS[None, None, :, 1], 1.0, -1.0)
        sz = np.where(_CORNERS[None, None, :, 2], 1.0, -1.0)
        gfx = np.einsum("nlc,nlc->nl", dot, sx * wy * wz)
        gfy = np.einsum("nlc,nlc->nl", dot, wx * sy * wz)
        gfz = np.einsum("nlc,nlc->nl", dot, wx * wy * sz)
        gf = np.stack([gfx, gfy, gfz], axis=2)  # (n, L, 3)
        grad_x = np.einsum("nla,l->na", gf, grid.scales)
    return grad_table, grad_x


def hash_encode(grid: HashGrid, x_local) -> Tensor:
    """Trilinear multi-level feature lookup for points in the block cube.

    ``x_local`` is a Tensor or array of shape (n, 3) or (3,), with every
    coordinate in [0, block_size]. Output is (n, L*F) (or (L*F,) for a single
    point), differentiable w.r.t. the tables and the positions.
    """
    single = False
    xt = x_local if isinstance(x_local, Tensor) else ad.constant(x_local)
    if xt.data.ndim == 1:
        single = True
        xt = xt.reshape(1, 3)
    b = grid.config.block_size
    if xt.data.size and (xt.data.min() < -1e-9 or xt.data.max() > b + 1e-9):
        raise ContractViolation("hash_encode input outside the block cube")
    x = np.clip(xt.data, 0.0, b)

    use_numba = _K is not None
    if use_numba:
        n = x.shape[0]
        out_data = np.zeros((n, grid.out_dim))
        idx = np.empty((n, grid.config.levels, 8), dtype=np.int64)
        frac = np.empty((n, grid.config.levels, 3))
        _K.hash_encode_fwd(
            grid.table.data, x, grid.scales, grid.resolutions, grid.dense,
            grid.config.table_size, out_data, idx, frac,
        )
    else:
        out_data, idx, frac = _encode_fwd_np(grid, x)

    out = Tensor(
        out_data,
        requires_grad=ad.active_tape() is not None
        and (grid.table.requires_grad or xt.requires_grad),
    )

    def back_table(g):
        if use_numba:
            grad_table = np.zeros_like(grid.table.data)
            _K.hash_encode_bwd(
                np.ascontiguousarray(g), grid.table.data, idx, frac, grid.scales,
                True, False, grad_table, np.empty((0, 3)),
            )
        else:
            grad_table, _ = _encode_bwd_np(grid, g, idx, frac, True, False)
        return grad_table

    def back_x(g):
        if use_numba:
            grad_x = np.zeros((x.shape[0], 3))
            _K.hash_encode_bwd(
                np.ascontiguousarray(g), grid.table.data, idx, frac, grid.scales,
                False, True, np.empty((0, grid.config.features)), grad_x,
            )
        else:
            _, grad_x = _encode_bwd_np(grid, g, idx, frac, False, True)
        return grad_x

    # When both the table and position need gradients the kernel could fuse
    # the two passes; kept separate because tracking and mapping each use only
    # one of them on the heavy path.
    ad.record("hash_encode", out, [(grid.table, back_table), (xt, back_x)])
    if single:
        return out.reshape(grid.out_dim)
    return out


def oneblob_encode(x_world, bins: int, block_size: float) -> Tensor:
    """Per-axis soft binning of world coordinates, wrapped modulo block size.

    Each coordinate is mapped to [0, 1) by (x mod block_size) / block_size and
    scored against ``bins`` Gaussian kernels (sigma = 1/bins) at the bin
    centers, with circular wrap. Output is (n, 3*bins), or (3*bins,) for a
    single point.
    """
    single = False
    xt = x_world if isinstance(x_world, Tensor) else ad.constant(x_world)
    if xt.data.ndim == 1:
        single = True
        xt = xt.reshape(1, 3)
    x = np.ascontiguousarray(xt.data)
    n = x.shape[0]

    if _K is not None:
        out_data = np.empty((n, 3 * bins))
        _K.oneblob_fwd(x, bins, block_size, out_data)
    else:
        t = np.mod(x, block_size) / block_size  # (n, 3)
        centers = (np.arange(bins) + 0.5) / bins
        d = t[:, :, None] - centers[None, None, :]
        d -= np.floor(d + 0.5)
        out_data = np.exp(-d * d * (0.5 * bins * bins)).reshape(n, 3 * bins)

    out = Tensor(
        out_data, requires_grad=ad.active_tape() is not None and xt.requires_grad
    )

    def back_x(g):
        if _K is not None:
            grad_x = np.zeros((n, 3))
            _K.oneblob_bwd(np.ascontiguousarray(g), out_data, x, bins, block_size, grad_x)
        else:
            t = np.mod(x, block_size) / block_size
            centers = (np.arange(bins) + 0.5) / bins
            d = t[:, :, None] - centers[None, None, :]
            d -= np.floor(d + 0.5)
            gg = g.reshape(n, 3, bins)
            oo = out_data.reshape(n, 3, bins)
            grad_x = (gg * oo * (-d * bins * bins)).sum(axis=2) / block_size
        return grad_x

    ad.record("oneblob_encode", out, [(xt, back_x)])
    if single:
        return out.reshape(3 * bins)
    return out
