"""Block allocation, containment and frustum queries, and the keyframe
pixel database.

Blocks are fixed-size axis-aligned cubes, each owning an independent hash
grid. They are allocated adaptively: whenever the fraction of newly observed
(uncovered) back-projected points in a frame exceeds a threshold, a new block
is created at the centroid of those uncovered points. Blocks are never moved,
resized, or deleted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParameterStore, Tensor
from .encoders import HashGrid, HashGridConfig, init_table
from .errors import ContractViolation
from .geometry import Intrinsics, Pose, backproject_pixels, frustum_vertices, frustum_planes


class NeuralBlock:
    """One fixed-size cube of the map with its own learnable feature grid."""

    def __init__(self, index: int, center: np.ndarray, grid: HashGrid,
                 creation_frame: int):
        self.index = index
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.grid = grid
        self.creation_frame = creation_frame
        self.keyframe_ids: list[int] = []
        self._frozen = None

    def frozen_grid(self) -> HashGrid:
        """Grid view sharing storage but exempt from gradients (tracking)."""
        if self._frozen is None:
            table = self.grid.table
            self._frozen = HashGrid(
                self.grid.config,
                table.constant() if hasattr(table, "constant") else Tensor(table.data),
            )
        return self._frozen


def point_in_block(block: NeuralBlock, x_world) -> bool:
    """Boundary-inclusive cube membership (infinity norm)."""
    x = np.asarray(x_world, dtype=np.float64).reshape(3)
    half = block.grid.config.block_size / 2.0
    return bool(np.all(np.abs(x - block.center) <= half))


class BlockAtlas:
    """All blocks plus a uniform coarse spatial index for containment."""

    def __init__(self, grid_config: HashGridConfig, store: ParameterStore | None = None):
        self.grid_config = grid_config
        self.blocks: list[NeuralBlock] = []
        self._store = store
        self._cell = grid_config.block_size
        self._index: dict[tuple[int, int, int], list[int]] = {}

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def block_size(self) -> float:
        return self.grid_config.block_size

    def _cells_overlapping(self, center: np.ndarray):
        half = self.block_size / 2.0
        lo = np.floor((center - half) / self._cell).astype(np.int64)
        hi = np.floor((center + half) / self._cell).astype(np.int64)
        for cx in range(lo[0], hi[0] + 1):
            for cy in range(lo[1], hi[1] + 1):
                for cz in range(lo[2], hi[2] + 1):
                    yield (cx, cy, cz)

    def allocate(self, center, creation_frame: int, rng: np.random.Generator) -> NeuralBlock:
        idx = len(self.blocks)
        table_data = init_table(self.grid_config, rng)
        if self._store is not None:
            table = self._store.register("grids", f"block{idx}", table_data)
        else:
            table = Tensor(table_data, requires_grad=True)
        block = NeuralBlock(idx, center, HashGrid(self.grid_config, table), creation_frame)
        self.blocks.append(block)
        for cell in self._cells_overlapping(block.center):
            self._index.setdefault(cell, []).append(idx)
        return block

    def blocks_near_point(self, p) -> list[NeuralBlock]:
        cell = tuple(np.floor(np.asarray(p) / self._cell).astype(np.int64))
        return [self.blocks[i] for i in self._index.get(cell, [])]

    def covered_mask(self, points: np.ndarray) -> np.ndarray:
        """Boolean (n,) mask: point lies inside at least one block."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        half = self.block_size / 2.0
        out = np.zeros(len(pts), dtype=bool)
        for block in self.blocks:
            out |= np.all(np.abs(pts - block.center) <= half, axis=1)
        return out

    def coverage_count(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        half = self.block_size / 2.0
        out = np.zeros(len(pts), dtype=np.int64)
        for block in self.blocks:
            out += np.all(np.abs(pts - block.center) <= half, axis=1)
        return out


@dataclass
class TauSample:
    """The sampled back-projections behind one allocation decision."""

    tau: float
    points: np.ndarray        # (n, 3) world points
    covered: np.ndarray       # (n,) bool

    @property
    def uncovered_points(self) -> np.ndarray:
        return self.points[~self.covered]


def compute_tau(frame, pose: Pose, k: Intrinsics, atlas: BlockAtlas,
                n_samples: int, rng: np.random.Generator) -> TauSample | None:
    """Fraction of sampled valid-depth back-projections not in any block.

    Returns None when the frame has no valid depth (allocation is skipped
    for such frames).
    """
    depth = frame.depth
    vs, us = np.nonzero(depth > 0.0)
    if len(us) == 0:
        return None
    if len(us) > n_samples:
        sel = rng.choice(len(us), size=n_samples, replace=False)
        us, vs = us[sel], vs[sel]
    pts = backproject_pixels(pose, k, us.astype(np.float64), vs.astype(np.float64),
                             depth[vs, us])
    covered = atlas.covered_mask(pts)
    tau = float((~covered).sum() / len(pts))
    return TauSample(tau=tau, points=pts, covered=covered)


def maybe_allocate(tau_sample: TauSample | None, atlas: BlockAtlas, tau_th: float,
                   creation_frame: int, rng: np.random.Generator) -> NeuralBlock | None:
    """Allocate a block at the centroid of uncovered points when tau > tau_th.

    The threshold comparison is strict; tau == tau_th does not allocate.
    """
    if tau_sample is None or tau_sample.tau <= tau_th:
        return None
    uncovered = tau_sample.uncovered_points
    center = uncovered.mean(axis=0)
    return atlas.allocate(center, creation_frame, rng)


def blocks_in_frustum(atlas: BlockAtlas, pose: Pose, k: Intrinsics,
                      near: float, far: float) -> list[int]:
    """Ids of blocks whose cube may intersect the viewing frustum.

    Conservative two-sided separating-plane test (frustum planes against the
    cube, cube axis slabs against the frustum's vertices). It can report
    extra blocks near corners but never misses an intersecting one.
    """
    if not atlas.blocks:
        return []
    centers = np.array([b.center for b in atlas.blocks])
    half = atlas.block_size / 2.0
    normals, offsets = frustum_planes(pose, k, near, far)
    verts = frustum_vertices(pose, k, near, far)

    # frustum plane vs cube: keep when the cube's most-inside corner is inside
    reach = half * np.abs(normals).sum(axis=1)  # (6,)
    plane_ok = np.all(centers @ normals.T + offsets + reach >= 0.0, axis=1)

    # cube slabs vs frustum bounding box
    fmin, fmax = verts.min(axis=0), verts.max(axis=0)
    slab_ok = np.all(
        (centers - half <= fmax) & (centers + half >= fmin), axis=1
    )
    keep = plane_ok & slab_ok
    return [int(i) for i in np.nonzero(keep)[0]]


@dataclass
class KeyframeRecord:
    """Pose plus the stored pixel subset and place-recognition descriptor."""

    frame_id: int
    timestamp: float
    pose: Pose
    us: np.ndarray            # (k,) int pixel columns
    vs: np.ndarray            # (k,) int pixel rows
    colors: np.ndarray        # (k, 3) in [0, 1]
    depths: np.ndarray        # (k,) meters, > 0
    descriptor: np.ndarray    # (d,) L2-normalized

    @property
    def n_pixels(self) -> int:
        return len(self.us)


def store_keyframe(frame, pose: Pose, keep_fraction: float, descriptor: np.ndarray,
                   rng: np.random.Generator) -> KeyframeRecord:
    """Keep a uniformly random fraction of the frame's valid-depth pixels."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ContractViolation("keep_fraction must be in (0, 1]")
    depth = frame.depth
    vs, us = np.nonzero(depth > 0.0)
    n_valid = len(us)
    if n_valid == 0:
        raise ContractViolation("keyframe needs at least one valid-depth pixel")
    keep = math.ceil(keep_fraction * n_valid)
    if keep < n_valid:
        sel = np.sort(rng.choice(n_valid, size=keep, replace=False))
        us, vs = us[sel], vs[sel]
    return KeyframeRecord(
        frame_id=frame.index,
        timestamp=frame.timestamp,
        pose=pose,
        us=us.astype(np.int64),
        vs=vs.astype(np.int64),
        colors=frame.color[vs, us].astype(np.float64),
        depths=depth[vs, us].astype(np.float64),
        descriptor=np.asarray(descriptor, dtype=np.float64),
    )


@dataclass
class PixelBatch:
    """Rays sampled from stored keyframe pixels for one mapping iteration."""

    kf_indices: np.ndarray    # (n,) index into the keyframe list
    us: np.ndarray
    vs: np.ndarray
    colors: np.ndarray        # (n, 3)
    depths: np.ndarray        # (n,)

    def __len__(self) -> int:
        return len(self.us)


class KeyframeDatabase:
    """Ordered list of keyframe records with uniform pixel sampling."""

    def __init__(self):
        self.records: list[KeyframeRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: KeyframeRecord) -> int:
        self.records.append(record)
        return len(self.records) - 1

    def _draw(self, kf_ids: list[int], n: int, rng: np.random.Generator):
        counts = np.array([self.records[i].n_pixels for i in kf_ids])
        cum = np.cumsum(counts)
        flat = rng.integers(0, cum[-1], size=n)
        which = np.searchsorted(cum, flat, side="right")
        offset = flat - (cum[which] - counts[which])
        return np.array(kf_ids)[which], offset

    def sample_pixels(self, n: int, rng: np.random.Generator,
                      kf_ids: list[int] | None = None) -> PixelBatch:
        if not self.records:
            raise ContractViolation("keyframe database is empty")
        ids = list(range(len(self.records))) if kf_ids is None else list(kf_ids)
        kfs, off = self._draw(ids, n, rng)
        us = np.empty(n, dtype=np.int64)
        vs = np.empty(n, dtype=np.int64)
        colors = np.empty((n, 3))
        depths = np.empty(n)
        for i, (k, o) in enumerate(zip(kfs, off)):
            rec = self.records[k]
            us[i] = rec.us[o]
            vs[i] = rec.vs[o]
            colors[i] = rec.colors[o]
            depths[i] = rec.depths[o]
        return PixelBatch(kfs, us, vs, colors, depths)


def sample_mapping_rays(db: KeyframeDatabase, n_global: int, n_recent: int,
                        newest_block: NeuralBlock | None, n_blocks: int,
                        rng: np.random.Generator) -> PixelBatch:
    """The mapping batch: n_global pixels over all keyframes, plus n_recent
    from keyframes associated with the newest block when more than one block
    exists."""
    batch = db.sample_pixels(n_global, rng)
    if n_blocks > 1 and newest_block is not None and newest_block.keyframe_ids:
        extra = db.sample_pixels(n_recent, rng, kf_ids=newest_block.keyframe_ids)
        batch = PixelBatch(
            np.concatenate([batch.kf_indices, extra.kf_indices]),
            np.concatenate([batch.us, extra.us]),
            np.concatenate([batch.vs, extra.vs]),
            np.concatenate([batch.colors, extra.colors]),
            np.concatenate([batch.depths, extra.depths]),
        )
    return batch
