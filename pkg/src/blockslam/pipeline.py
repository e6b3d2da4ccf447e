"""The SLAM loop: per-frame tracking, windowed mapping, and loop closure.

Two logical processes share the map. Tracking estimates each frame's pose
against frozen field parameters; mapping jointly refines the field and all
keyframe poses except the first (gauge fix). Both minimize the same rendered
objective. Loop closure recognizes revisited places with a global frame
descriptor, re-optimizes the current keyframe pose from reprojection error,
distributes the correction over the intervening keyframes, and refines the
map in two stages.

The default execution is strictly sequential and bit-deterministic for a
fixed seed. An optional threaded mode runs mapping in a worker that
interleaves with tracking at iteration granularity under a shared lock.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import pose_tape as pt
from . import renderer as rnd
from .autodiff import ParameterStore
from .blocks import (BlockAtlas, KeyframeDatabase, blocks_in_frustum, compute_tau,
                     maybe_allocate, sample_mapping_rays, store_keyframe)
from .dataio import Config, Sequence, rng_for
from .encoders import HashGridConfig
from .errors import DataError
from .field import NeuralField, query_points
from .geometry import Intrinsics, Pose, compose, invert, se3_exp, se3_log
from .renderer import LossWeights

log = logging.getLogger(__name__)


class _TooFewRays(Exception):
    """Internal: a batch kept too few renderable rays for a useful step."""


@dataclass
class TrackerState:
    """Per-frame pose estimates; the last two drive the motion model."""

    poses: list[Pose] = field(default_factory=list)
    low_confidence: list[bool] = field(default_factory=list)

    def motion_model(self) -> Pose:
        if len(self.poses) == 1:
            return self.poses[-1]
        t1, t2 = self.poses[-1], self.poses[-2]
        rel = compose(invert(t2), t1)
        # The recursion T_t = T_{t-1} rel amplifies rounding in the rotation
        # exponentially across frames; a log/exp round trip of the relative
        # motion re-projects it onto SE(3) and keeps growth linear.
        rel = se3_exp(se3_log(rel))
        return compose(t1, rel)


class DescriptorDb:
    """Per-keyframe place-recognition descriptors, appended in order."""

    def __init__(self):
        self.descriptors: list[np.ndarray] = []
        self.frame_ids: list[int] = []
        self.timestamps: list[float] = []

    def __len__(self) -> int:
        return len(self.descriptors)

    def append(self, descriptor: np.ndarray, frame_id: int, timestamp: float) -> int:
        self.descriptors.append(np.asarray(descriptor, dtype=np.float64))
        self.frame_ids.append(frame_id)
        self.timestamps.append(timestamp)
        return len(self.descriptors) - 1

    def similarities(self, descriptor: np.ndarray) -> np.ndarray:
        if not self.descriptors:
            return np.zeros(0)
        return np.stack(self.descriptors) @ descriptor


@dataclass
class LoopEvent:
    current_kf: int
    r1: int
    r2: int | None
    corrected_pose: Pose
    correction: Pose


def compute_descriptor(frame, far: float, grid: int = 8, depth_bins: int = 16) -> np.ndarray:
    """Deterministic global frame descriptor.

    An 8x8 grid of mean grayscale (64 dims) concatenated with a 16-bin
    valid-depth histogram over [0, far) (16 dims), L2-normalized together.
    """
    gray = frame.color.mean(axis=2)
    h, w = gray.shape
    ys = np.linspace(0, h, grid + 1).astype(int)
    xs = np.linspace(0, w, grid + 1).astype(int)
    cells = np.empty(grid * grid)
    for i in range(grid):
        for j in range(grid):
            patch = gray[ys[i]:ys[i + 1], xs[j]:xs[j + 1]]
            cells[i * grid + j] = patch.mean() if patch.size else 0.0
    depth = frame.depth
    valid = depth[depth > 0.0]
    hist, _ = np.histogram(valid, bins=depth_bins, range=(0.0, far))
    v = np.concatenate([cells, hist.astype(np.float64)])
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


@dataclass
class FrameRecord:
    frame: int
    timestamp: float
    track_ms: float = 0.0
    map_ms: float = 0.0
    tau: float = float("nan")
    n_blocks: int = 0
    n_keyframes: int = 0
    keyframe: int = 0
    loop: int = 0
    low_confidence: int = 0
    loss_color: float = float("nan")
    loss_depth: float = float("nan")
    loss_sdf: float = float("nan")
    loss_fs: float = float("nan")
    loss_smooth: float = float("nan")
    loss_total: float = float("nan")


@dataclass
class RunResult:
    poses: list[Pose]
    timestamps: list[float]
    records: list[FrameRecord]
    loop_events: list[LoopEvent]
    n_blocks: int


class SlamSystem:
    """Owns the map, the keyframe database, and all optimization state."""

    def __init__(self, sequence: Sequence, config: Config):
        self.seq = sequence
        self.cfg = config
        self.k: Intrinsics = sequence.intrinsics
        self.store = ParameterStore()
        grid_cfg = HashGridConfig(
            levels=config.levels, table_size=config.table_size,
            features=config.features, res_min=config.res_min,
            res_max=config.res_max, block_size=config.block_size,
        )
        self.atlas = BlockAtlas(grid_cfg, self.store)
        self.field = NeuralField.create(
            self.store, encode_dim=config.encode_dim,
            oneblob_bins=config.oneblob_bins, block_size=config.block_size,
            g_dim=config.g_dim, hidden_width=config.mlp_width,
            n_layers=config.mlp_layers, rng=rng_for(config.seed, "field-init"),
        )
        # The sdf/free-space weights follow the truncation-normalized
        # convention of the SDF-rendering lineage: the published multipliers
        # apply to (error/tr)^2, so the metric-unit losses used here are
        # scaled by 1/tr^2 (x100 at tr = 10 cm). Without this the free-space
        # plateau is two orders of magnitude too loose for sharp rendering.
        norm = 1.0 / (config.truncation ** 2)
        self.weights = LossWeights(
            color=config.lambda_color, depth=config.lambda_depth,
            sdf=config.lambda_sdf * norm, free_space=config.lambda_fs * norm,
            smooth=config.lambda_smooth,
        )
        self.db = KeyframeDatabase()
        self.desc_db = DescriptorDb()
        self.kf_pose_params: dict[int, ad.Parameter] = {}
        self.kf_of_frame: dict[int, int] = {}
        self.tracker = TrackerState()
        self.records: list[FrameRecord] = []
        self.loop_events: list[LoopEvent] = []
        self._rng = {
            name: rng_for(config.seed, name)
            for name in ("tracking", "mapping", "allocation", "keyframe",
                         "smoothness", "loop", "blocks")
        }
        self._lock = threading.RLock()
        self._last_losses: dict[str, float] = {}

    # ------------------------------------------------------------------
    # shared forward machinery
    # ------------------------------------------------------------------
    def _dirs_cam(self, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
        k = self.k
        return np.stack(
            [(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us, dtype=np.float64)],
            axis=1,
        )

    def _losses_from_batch(self, origin, dirs, depths, slot_valid, obs_color,
                           obs_depth, train_field: bool, with_smooth: bool,
                           smooth_rng=None, robust: bool = False):
        """Rendered losses for a ray batch whose origins/dirs are on the tape.

        ``origin`` is (n, 3) or (3,); ``dirs`` (n, 3). Returns the total loss
        tensor plus the per-component floats for logging.

        With ``robust`` (tracking), rays whose truncation-band error is an
        outlier are dropped from every term: their surface region is inside a
        block but was never observed by mapping, so the untrained field there
        would drag the pose systematically.
        """
        cfg = self.cfg
        n, s = depths.shape
        if origin.data.ndim == 1:
            origin3 = origin.reshape(1, 1, 3)
        else:
            origin3 = origin.reshape(n, 1, 3)
        pts = origin3 + ad.constant(depths.reshape(n, s, 1)) * dirs.reshape(n, 1, 3)
        flat = pts.reshape(n * s, 3)
        sdf, color, cov = query_points(flat, self.atlas.blocks, self.field,
                                       train_field=train_field)
        valid = slot_valid & (cov.reshape(n, s) > 0)
        rendered = valid.any(axis=1)
        if rendered.sum() < cfg.min_valid_rays:
            raise _TooFewRays(f"{int(rendered.sum())} renderable rays")
        sdf2 = sdf.reshape(n, s)
        render_valid = rnd.first_surface_mask(sdf2.data, depths, valid,
                                              cfg.truncation)
        s_obs, r_tr, r_fs = rnd.sdf_region_masks(depths, obs_depth, valid,
                                                 cfg.truncation)
        # Rays whose observed surface point lies outside every block cannot be
        # rendered correctly; they are excluded from the photometric terms
        # (regions without blocks must not affect the optimization).
        has_d = obs_depth > 0.0
        surf_pts = origin.data.reshape(-1, 3) + obs_depth[:, None] * dirs.data
        surf_cov = self.atlas.covered_mask(surf_pts)
        ray_ok = ~has_d | surf_cov
        if robust:
            band_counts = r_tr.sum(axis=1)
            band_err = np.where(
                band_counts > 0,
                (((s_obs - sdf2.data) ** 2) * r_tr).sum(axis=1)
                / np.maximum(band_counts, 1),
                0.0,
            )
            scored = band_counts > 0
            if scored.any():
                med = np.median(band_err[scored])
                cut = max(10.0 * med, 1e-4)
                inlier = ~scored | (band_err <= cut)
                ray_ok &= inlier
                keep = valid & ray_ok[:, None]
                r_tr &= keep
                r_fs &= keep
                render_valid &= keep
                rendered = rendered & ray_ok
                if rendered.sum() < cfg.min_valid_rays:
                    raise _TooFewRays("robust gating removed too many rays")
        d_hat, c_hat, _ = rnd.render_batch(sdf2, color.reshape(n, s, 3), depths,
                                           render_valid, cfg.render_band)
        rendered_cd = rendered & ray_ok
        l_c, l_d = rnd.loss_color_depth(d_hat, c_hat, obs_color, obs_depth,
                                        rendered_cd)
        l_sdf = rnd.loss_sdf(sdf2, s_obs, r_tr)
        l_fs = rnd.loss_free_space(sdf2, r_fs, cfg.truncation)
        if with_smooth:
            l_sm = rnd.loss_smoothness(self.atlas, self.field, cfg.smooth_points,
                                       cfg.smooth_eps, smooth_rng,
                                       train_field=train_field)
        else:
            l_sm = ad.constant(0.0)
        total = rnd.loss_total(l_c, l_d, l_sdf, l_fs, l_sm, self.weights)
        self._last_losses = {
            "color": l_c.item(), "depth": l_d.item(), "sdf": l_sdf.item(),
            "fs": l_fs.item(), "smooth": l_sm.item(), "total": total.item(),
        }
        return total

    # ------------------------------------------------------------------
    # tracking
    # ------------------------------------------------------------------
    def init_first_frame(self, frame) -> None:
        """Anchor the world frame, allocate initial blocks, pretrain the map."""
        cfg = self.cfg
        if not np.any(frame.depth > 0.0):
            raise DataError("first frame has no valid depth")
        pose = Pose.identity()
        self.tracker.poses.append(pose)
        self.tracker.low_confidence.append(False)
        rng = self._rng["allocation"]
        tau = None
        for _ in range(32):  # allocation loop: cover the first view
            tau = compute_tau(frame, pose, self.k, self.atlas,
                              cfg.n_alloc_samples, rng)
            if maybe_allocate(tau, self.atlas, cfg.tau_th, frame.index,
                              self._rng["blocks"]) is None:
                break
        self._insert_keyframe(frame, pose)
        self.map_step(cfg.iters_first)
        rec = FrameRecord(frame=frame.index, timestamp=frame.timestamp,
                          tau=tau.tau if tau else float("nan"),
                          n_blocks=len(self.atlas), n_keyframes=len(self.db),
                          keyframe=1)
        self._fill_losses(rec)
        self.records.append(rec)

    def track_frame(self, frame) -> Pose:
        """Estimate the frame pose by minimizing the rendered objective with
        the field frozen, then run allocation and the keyframe policy."""
        cfg = self.cfg
        t_start = time.perf_counter()
        current = self.tracker.motion_model()
        rng = self._rng["tracking"]
        # One persistent increment parameter for tracking: its Adam moment
        # statistics carry across frames, so steps anneal with gradient noise
        # instead of opening every frame at the full learning rate.
        if "track" not in self.store.groups.get("poses", {}):
            self.store.register("poses", "track", np.zeros(6))
        xi = self.store.get("poses", "track")
        xi.data[:] = 0.0
        depth_img = frame.depth
        color_img = frame.color
        skipped = 0
        # Per-frame learning-rate schedule: open at 10x the base rate so the
        # pose can cover the motion-model residual, anneal geometrically to
        # a tenth of it so the final iterations settle near the optimum
        # instead of bouncing at a fixed step size.
        n_it = cfg.iters_tracking
        lr_schedule = [
            cfg.lr_pose_tracking * 10.0 ** (1.0 - 2.0 * i / max(n_it - 1, 1))
            for i in range(n_it)
        ]
        for it in range(cfg.iters_tracking):
            us = rng.integers(0, self.k.width, size=cfg.n_t)
            vs = rng.integers(0, self.k.height, size=cfg.n_t)
            obs_depth = depth_img[vs, us]
            obs_color = color_img[vs, us]
            depths, slot_valid = rnd.sample_depth_batch(
                obs_depth, cfg.near, cfg.far, cfg.n1, cfg.n2, cfg.truncation, rng,
            )
            dirs_cam = self._dirs_cam(us.astype(np.float64), vs.astype(np.float64))
            with self._lock:
                tape = ad.Tape()

                def fwd(pose):
                    origin, dirs = pt.apply_increment_rays(xi, pose, dirs_cam)
                    return self._losses_from_batch(
                        origin, dirs, depths, slot_valid, obs_color, obs_depth,
                        train_field=False, with_smooth=False, robust=True,
                    )

                try:
                    loss = ad.run_forward(tape, lambda: fwd(current))
                except _TooFewRays:
                    skipped += 1
                    log.warning("frame %d: tracking iteration skipped "
                                "(too few valid rays)", frame.index)
                    continue
                ad.backward(tape, loss)
                self.store.adam_step({"poses": lr_schedule[it]})
                self.store.zero_grad()
                candidate = pt.bake(xi.data, current)
                xi.data[:] = 0.0
                # monotone acceptance on the same batch: a proposed step that
                # does not reduce the sampled objective is discarded, which
                # suppresses optimizer noise when the pose is already settled
                try:
                    better = fwd(candidate).item() <= loss.item()
                except _TooFewRays:
                    better = False
                if better:
                    current = candidate
        low_conf = skipped == cfg.iters_tracking
        if low_conf:
            log.warning("frame %d: all tracking iterations skipped; "
                        "keeping motion-model pose", frame.index)
        self.tracker.poses.append(current)
        self.tracker.low_confidence.append(low_conf)

        # allocation, then the keyframe policy (allocation forces a keyframe)
        tau = compute_tau(frame, current, self.k, self.atlas,
                          cfg.n_alloc_samples, self._rng["allocation"])
        with self._lock:
            new_block = maybe_allocate(tau, self.atlas, cfg.tau_th, frame.index,
                                       self._rng["blocks"])
            is_kf = (frame.index % cfg.keyframe_every == 0) or new_block is not None
            kf_idx = self._insert_keyframe(frame, current) if is_kf else None

        loop_flag = 0
        if kf_idx is not None and cfg.loop_enabled:
            hit = self.detect_loop(kf_idx)
            if hit is not None:
                event = self.correct_loop(kf_idx, *hit)
                if event is not None:
                    loop_flag = 1
                    current = event.corrected_pose
        track_ms = (time.perf_counter() - t_start) * 1e3

        rec = FrameRecord(frame=frame.index, timestamp=frame.timestamp,
                          track_ms=track_ms,
                          tau=tau.tau if tau else float("nan"),
                          n_blocks=len(self.atlas), n_keyframes=len(self.db),
                          keyframe=int(kf_idx is not None), loop=loop_flag,
                          low_confidence=int(low_conf))
        self._fill_losses(rec)
        self.records.append(rec)
        return current

    def _fill_losses(self, rec: FrameRecord) -> None:
        ls = self._last_losses
        if ls:
            rec.loss_color = ls["color"]
            rec.loss_depth = ls["depth"]
            rec.loss_sdf = ls["sdf"]
            rec.loss_fs = ls["fs"]
            rec.loss_smooth = ls["smooth"]
            rec.loss_total = ls["total"]

    def _insert_keyframe(self, frame, pose: Pose) -> int:
        cfg = self.cfg
        descriptor = compute_descriptor(frame, cfg.far)
        record = store_keyframe(frame, pose, cfg.keep_fraction, descriptor,
                                self._rng["keyframe"])
        kf_idx = self.db.append(record)
        self.desc_db.append(descriptor, frame.index, frame.timestamp)
        self.kf_of_frame[frame.index] = kf_idx
        for block_id in blocks_in_frustum(self.atlas, pose, self.k,
                                          cfg.near, cfg.far):
            self.atlas.blocks[block_id].keyframe_ids.append(kf_idx)
        if kf_idx > 0:  # the first keyframe is the gauge anchor
            self.kf_pose_params[kf_idx] = self.store.register(
                "poses", f"kf{kf_idx}", np.zeros(6)
            )
        return kf_idx

    # ------------------------------------------------------------------
    # mapping
    # ------------------------------------------------------------------
    def map_step(self, n_iters: int, optimize_poses: bool = True) -> None:
        """Joint optimization of grids, decoders, and keyframe poses."""
        cfg = self.cfg
        rng = self._rng["mapping"]
        smooth_rng = self._rng["smoothness"]
        newest = self.atlas.blocks[-1] if len(self.atlas) else None
        for _ in range(n_iters):
            with self._lock:
                batch = sample_mapping_rays(self.db, cfg.n_m, cfg.n_a, newest,
                                            len(self.atlas), rng)
                depths, slot_valid = rnd.sample_depth_batch(
                    batch.depths, cfg.near, cfg.far, cfg.n1, cfg.n2,
                    cfg.truncation, rng,
                )
                tape = ad.Tape()

                def fwd():
                    origin, dirs = self._batch_rays(batch, optimize_poses)
                    return self._losses_from_batch(
                        origin, dirs, depths, slot_valid, batch.colors,
                        batch.depths, train_field=True, with_smooth=True,
                        smooth_rng=smooth_rng,
                    )

                try:
                    loss = ad.run_forward(tape, fwd)
                except _TooFewRays:
                    log.warning("mapping iteration skipped: too few valid rays")
                    continue
                ad.backward(tape, loss)
                lrs = {"grids": cfg.lr_grids, "decoders": cfg.lr_decoders}
                if optimize_poses:
                    lrs["poses"] = cfg.lr_poses
                self.store.adam_step(lrs)
                self.store.zero_grad()
                if optimize_poses:
                    self._bake_keyframe_poses()

    def _batch_rays(self, batch, optimize_poses: bool):
        """Per-keyframe ray assembly; keyframe increments stay on the tape."""
        n = len(batch)
        us = batch.us.astype(np.float64)
        vs = batch.vs.astype(np.float64)
        dirs_cam_all = self._dirs_cam(us, vs)
        origins = None
        dirs = None
        for kf in np.unique(batch.kf_indices):
            rows = np.nonzero(batch.kf_indices == kf)[0]
            rec = self.db.records[kf]
            dirs_cam = dirs_cam_all[rows]
            xi = self.kf_pose_params.get(int(kf)) if optimize_poses else None
            if xi is not None:
                o_kf, d_kf = pt.apply_increment_rays(xi, rec.pose, dirs_cam)
                o_rows = o_kf.reshape(1, 3) + ad.constant(np.zeros((len(rows), 3)))
            else:
                o_rows = ad.constant(
                    np.broadcast_to(rec.pose.translation, (len(rows), 3)).copy()
                )
                d_kf = ad.constant(dirs_cam @ rec.pose.rotation.T)
            o_part = ad.put_rows(n, rows, o_rows)
            d_part = ad.put_rows(n, rows, d_kf)
            origins = o_part if origins is None else origins + o_part
            dirs = d_part if dirs is None else dirs + d_part
        return origins, dirs

    def _bake_keyframe_poses(self) -> None:
        for kf_idx, xi in self.kf_pose_params.items():
            if np.any(xi.data != 0.0):
                rec = self.db.records[kf_idx]
                rec.pose = pt.bake(xi.data, rec.pose)
                xi.data[:] = 0.0

    # ------------------------------------------------------------------
    # loop closure
    # ------------------------------------------------------------------
    def detect_loop(self, kf_idx: int):
        """Top-K similarity query outside the adjacency window.

        Returns (r1, r2 or None) or None. The acceptance threshold is the
        minimum similarity between the current keyframe and its in-window
        neighbors; r1 maximizes similarity, r2 the timestamp distance.
        """
        cfg = self.cfg
        window = cfg.loop_adjacency
        if len(self.desc_db) < window + 2:
            return None
        d = self.desc_db.descriptors[kf_idx]
        sims = self.desc_db.similarities(d)
        idx = np.arange(len(sims))
        dist = np.abs(idx - kf_idx)
        neighbors = (dist <= window) & (dist > 0)
        if not neighbors.any():
            return None
        threshold = sims[neighbors].min()
        eligible = np.nonzero(dist > window)[0]
        if eligible.size == 0:
            return None
        order = eligible[np.argsort(-sims[eligible])][:cfg.loop_k]
        passing = [int(i) for i in order if sims[i] > threshold]
        if not passing:
            return None
        r1 = passing[0]
        r2 = None
        if len(passing) > 1:
            t_cur = self.desc_db.timestamps[kf_idx]
            rest = [i for i in passing if i != r1]
            r2 = max(rest, key=lambda i: abs(self.desc_db.timestamps[i] - t_cur))
        return r1, r2

    def correct_loop(self, kf_idx: int, r1: int, r2: int | None) -> LoopEvent | None:
        """Reprojection-error pose fix for the current keyframe, correction
        distribution over the loop, and two-stage map refinement."""
        cfg = self.cfg
        rng = self._rng["loop"]
        rec = self.db.records[kf_idx]
        refs = [r1] + ([r2] if r2 is not None else [])
        n_px = min(cfg.loop_n_corr, rec.n_pixels)
        sel = rng.choice(rec.n_pixels, size=n_px, replace=False)
        us = rec.us[sel].astype(np.float64)
        vs = rec.vs[sel].astype(np.float64)
        dcam = self._dirs_cam(us, vs) * rec.depths[sel][:, None]

        ref_data = []
        for r in refs:
            ref_rec = self.db.records[r]
            ref_frame = self.seq.frames[ref_rec.frame_id]
            ref_data.append((ref_rec.pose, ref_frame.depth))

        old_pose = rec.pose
        with self._lock:
            xi = self.store.register("poses", "loopfix", np.zeros(6))
            current = old_pose
            enough = True
            for _ in range(cfg.loop_iters):
                tape = ad.Tape()
                base = current

                def fwd():
                    return self._reprojection_residual(xi, base, dcam, us, vs,
                                                       ref_data)

                try:
                    loss = ad.run_forward(tape, fwd)
                except _TooFewRays:
                    enough = False
                    break
                ad.backward(tape, loss)
                self.store.adam_step({"poses": cfg.loop_lr})
                self.store.zero_grad()
                current = pt.bake(xi.data, current)
                xi.data[:] = 0.0
            self.store.remove("poses", "loopfix")
            if not enough:
                log.warning("loop at keyframe %d rejected: too few correspondences",
                            kf_idx)
                return None

            delta = compose(current, invert(old_pose))
            self._distribute_correction(r1, kf_idx, delta)
            self.map_step(cfg.loop_stage_iters, optimize_poses=False)
            self.map_step(cfg.loop_stage_iters, optimize_poses=True)
        event = LoopEvent(current_kf=kf_idx, r1=r1, r2=r2,
                          corrected_pose=self.db.records[kf_idx].pose,
                          correction=delta)
        self.loop_events.append(event)
        return event

    def _reprojection_residual(self, xi, base: Pose, dcam: np.ndarray,
                               us: np.ndarray, vs: np.ndarray, ref_data):
        """Round-trip pixel error through each reference keyframe.

        Pixels are lifted with the current keyframe's stored depth, projected
        into the reference view, re-lifted with bilinearly interpolated
        reference depth, and reprojected into the current keyframe; invalid
        interpolations drop out. Returns None when too few correspondences
        survive.
        """
        k = self.k
        world = pt.apply_increment_points(xi, base, dcam)
        total = None
        n_surviving = 0
        for ref_pose, ref_depth in ref_data:
            cam = ad.matmul(world - ad.constant(ref_pose.translation),
                            ad.constant(ref_pose.rotation))
            z = cam[:, 2]
            in_front = z.data > 0.05
            zs = ad.where_mask(in_front, z, ad.constant(np.ones_like(z.data)))
            u_r = cam[:, 0] * k.fx / zs + k.cx
            v_r = cam[:, 1] * k.fy / zs + k.cy
            d_interp, d_ok = _bilinear_depth(ref_depth, u_r, v_r)
            ok = in_front & d_ok
            n_surviving += int(ok.sum())
            dir_r = ad.stack([
                (u_r - k.cx) * (1.0 / k.fx),
                (v_r - k.cy) * (1.0 / k.fy),
                ad.constant(np.ones_like(u_r.data)),
            ], axis=1)
            cam_r = dir_r * d_interp.reshape(-1, 1)
            world_r = ad.matmul(cam_r, ad.constant(ref_pose.rotation.T)) \
                + ad.constant(ref_pose.translation)
            cam_c = pt.apply_increment_inverse_points(xi, base, world_r)
            zc = cam_c[:, 2]
            ok = ok & (zc.data > 0.05)
            zcs = ad.where_mask(zc.data > 0.05, zc, ad.constant(np.ones_like(zc.data)))
            u_c = cam_c[:, 0] * k.fx / zcs + k.cx
            v_c = cam_c[:, 1] * k.fy / zcs + k.cy
            err = ad.square(u_c - ad.constant(us)) + ad.square(v_c - ad.constant(vs))
            masked = err * ad.constant(ok.astype(np.float64))
            count = max(int(ok.sum()), 1)
            term = masked.sum() * (1.0 / count)
            total = term if total is None else total + term
        if n_surviving < self.cfg.loop_min_corr:
            raise _TooFewRays(f"{n_surviving} surviving correspondences")
        return total

    def _distribute_correction(self, r1: int, kf_cur: int, delta: Pose) -> None:
        """Tangent-interpolated correction over keyframes in [r1, current]."""
        log_delta = se3_log(delta)
        span = kf_cur - r1
        for i in range(r1, kf_cur + 1):
            alpha = (i - r1) / span if span > 0 else 1.0
            if alpha == 0.0:
                continue
            rec = self.db.records[i]
            rec.pose = compose(se3_exp(alpha * log_delta), rec.pose)
            # keep the tracker history consistent for the motion model
            frame_id = rec.frame_id
            if frame_id < len(self.tracker.poses):
                self.tracker.poses[frame_id] = rec.pose

    # ------------------------------------------------------------------
    # the run loop
    # ------------------------------------------------------------------
    def final_trajectory(self):
        """Per-frame poses: refined keyframe poses where available."""
        poses = []
        for frame_id, pose in enumerate(self.tracker.poses):
            kf = self.kf_of_frame.get(frame_id)
            poses.append(self.db.records[kf].pose if kf is not None else pose)
        return poses

    def run(self) -> RunResult:
        frames = self.seq.frames
        if not frames:
            raise DataError("empty sequence")
        self.init_first_frame(frames[0])
        map_thread = None
        if self.cfg.threads > 1:
            map_thread = _MappingWorker(self)
            map_thread.start()
        try:
            for frame in frames[1:]:
                self.track_frame(frame)
                if frame.index % self.cfg.map_every == 0:
                    if map_thread is None:
                        t0 = time.perf_counter()
                        self.map_step(self.cfg.iters_mapping)
                        self.records[-1].map_ms = (time.perf_counter() - t0) * 1e3
                    else:
                        map_thread.request(self.cfg.iters_mapping)
                frame.drop_cache()  # stored subsets suffice; reloads are lazy
        finally:
            if map_thread is not None:
                map_thread.stop()
                map_thread.join()
        timestamps = [f.timestamp for f in frames]
        return RunResult(
            poses=self.final_trajectory(), timestamps=timestamps,
            records=self.records, loop_events=self.loop_events,
            n_blocks=len(self.atlas),
        )


class _MappingWorker(threading.Thread):
    """Optional threaded mapping: runs requested iterations under the shared
    lock, interleaving with tracking at iteration granularity."""

    def __init__(self, system: SlamSystem):
        super().__init__(daemon=True)
        self.system = system
        self._pending = threading.Semaphore(0)
        self._stop = False
        self._count = 0
        self._count_lock = threading.Lock()

    def request(self, n_iters: int) -> None:
        with self._count_lock:
            self._count += n_iters
        self._pending.release()

    def stop(self) -> None:
        self._stop = True
        self._pending.release()

    def run(self) -> None:
        while True:
            self._pending.acquire()
            if self._stop:
                return
            while True:
                with self._count_lock:
                    if self._count == 0:
                        break
                    self._count -= 1
                self.system.map_step(1)


def _bilinear_depth(depth_img: np.ndarray, u, v):
    """Differentiable bilinear depth interpolation at continuous pixels.

    Returns (interp Tensor (n,), valid (n,) bool). A sample is valid when all
    four neighbors are in bounds and carry positive depth.
    """
    h, w = depth_img.shape
    ud, vd = u.data, v.data
    inb = (ud >= 0) & (ud <= w - 1 - 1e-9) & (vd >= 0) & (vd <= h - 1 - 1e-9)
    u0 = np.clip(np.floor(ud), 0, w - 2).astype(np.int64)
    v0 = np.clip(np.floor(vd), 0, h - 2).astype(np.int64)
    fu = ad.where_mask(inb, u - ad.constant(u0.astype(np.float64)), ad.constant(np.zeros_like(ud)))
    fv = ad.where_mask(inb, v - ad.constant(v0.astype(np.float64)), ad.constant(np.zeros_like(vd)))
    d00 = depth_img[v0, u0]
    d01 = depth_img[v0, u0 + 1]
    d10 = depth_img[v0 + 1, u0]
    d11 = depth_img[v0 + 1, u0 + 1]
    valid = inb & (d00 > 0) & (d01 > 0) & (d10 > 0) & (d11 > 0)
    one = ad.constant(np.ones_like(ud))
    w00 = (one - fu) * (one - fv)
    w01 = fu * (one - fv)
    w10 = (one - fu) * fv
    w11 = fu * fv
    interp = (w00 * ad.constant(d00) + w01 * ad.constant(d01)
              + w10 * ad.constant(d10) + w11 * ad.constant(d11))
    return interp, valid
