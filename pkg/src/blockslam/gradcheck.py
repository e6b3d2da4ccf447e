"""Finite-difference verification of every differentiable operation family.

Two layers of checking:

* per-family probes (hash encode, one-blob, MLP layers, rendering weights,
  each loss term, the pose-increment chain), each on a dedicated micro input;
* the full training objective on a randomized micro-scene (2-level grids,
  tiny tables, 2x8 decoders, 4 rays x 8 samples), differentiated against
  central differences for every parameter group.

Analytic and numeric gradients must agree to 1e-3 relative (1e-6 absolute
floor) with step h = 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import pose_tape as pt
from . import renderer as rnd
from .autodiff import ParameterStore
from .blocks import BlockAtlas
from .encoders import HashGridConfig, hash_encode, oneblob_encode
from .field import NeuralField, query_points
from .geometry import se3_exp
from .renderer import LossWeights

TOL_REL = 1e-3
TOL_ABS = 1e-6
FD_STEP = 1e-4


@dataclass
class CheckResult:
    family: str
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOL_REL


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), TOL_ABS)
    return np.abs(a - b) / denom


def _fd_probe(forward, param: ad.Tensor, indices, h: float = FD_STEP) -> float:
    """Max relative error between param.grad and central differences at the
    given flat indices. ``forward`` must be deterministic."""
    flat = param.data.reshape(-1)
    grad = param.grad.reshape(-1)
    worst = 0.0
    for i in indices:
        keep = flat[i]
        flat[i] = keep + h
        fp = forward()
        flat[i] = keep - h
        fm = forward()
        flat[i] = keep
        fd = (fp - fm) / (2.0 * h)
        worst = max(worst, float(_rel_err(grad[i], fd)))
    return worst


def _probe_indices(param: ad.Tensor, rng: np.random.Generator, k: int = 8):
    """A deterministic mix of the largest-gradient entries and random ones."""
    g = np.abs(param.grad).reshape(-1)
    top = np.argsort(-g)[: k // 2]
    rand = rng.integers(0, g.size, size=k - len(top))
    return np.unique(np.concatenate([top, rand]))


@dataclass
class MicroScene:
    """A tiny randomized SLAM training instance, fully deterministic."""

    store: ParameterStore
    atlas: BlockAtlas
    field: NeuralField
    xi: ad.Parameter
    base_pose: object
    dirs_cam: np.ndarray
    depths: np.ndarray
    slot_valid: np.ndarray
    obs_color: np.ndarray
    obs_depth: np.ndarray
    truncation: float
    render_band: float
    smooth_seed: int
    weights: LossWeights

    @property
    def n_rays(self) -> int:
        return self.dirs_cam.shape[0]

    @property
    def n_samples(self) -> int:
        return self.depths.shape[1]

    def loss_value(self) -> float:
        return self.forward().item()

    def forward(self) -> ad.Tensor:
        n, s = self.depths.shape
        origin, dirs = pt.apply_increment_rays(self.xi, self.base_pose, self.dirs_cam)
        pts = origin.reshape(1, 1, 3) \
            + ad.constant(self.depths.reshape(n, s, 1)) * dirs.reshape(n, 1, 3)
        sdf, color, cov = query_points(pts.reshape(n * s, 3), self.atlas.blocks,
                                       self.field, train_field=True)
        valid = self.slot_valid & (cov.reshape(n, s) > 0)
        sdf2 = sdf.reshape(n, s)
        render_valid = rnd.first_surface_mask(sdf2.data, self.depths, valid,
                                              self.truncation)
        d_hat, c_hat, _ = rnd.render_batch(sdf2, color.reshape(n, s, 3),
                                           self.depths, render_valid,
                                           self.render_band)
        rendered = valid.any(axis=1)
        l_c, l_d = rnd.loss_color_depth(d_hat, c_hat, self.obs_color,
                                        self.obs_depth, rendered)
        s_obs, r_tr, r_fs = rnd.sdf_region_masks(self.depths, self.obs_depth,
                                                 valid, self.truncation)
        l_sdf = rnd.loss_sdf(sdf2, s_obs, r_tr)
        l_fs = rnd.loss_free_space(sdf2, r_fs, self.truncation)
        l_sm = rnd.loss_smoothness(self.atlas, self.field, 8, 0.05,
                                   np.random.default_rng(self.smooth_seed))
        return rnd.loss_total(l_c, l_d, l_sdf, l_fs, l_sm, self.weights)


def build_micro_scene(seed: int) -> MicroScene:
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    cfg = HashGridConfig(levels=2, table_size=64, features=2, res_min=2,
                         res_max=4, block_size=2.0)
    atlas = BlockAtlas(cfg, store)
    atlas.allocate([0.0, 0.0, 1.2], 0, rng)
    atlas.allocate([0.6, 0.2, 2.0], 0, rng)
    for b in atlas.blocks:
        b.grid.table.data[:] = rng.uniform(-0.5, 0.5, b.grid.table.data.shape)
    field = NeuralField.create(store, encode_dim=4, oneblob_bins=16,
                               block_size=2.0, g_dim=15, hidden_width=8,
                               n_layers=2, rng=rng)
    base_pose = se3_exp(rng.standard_normal(6) * 0.05)
    n_rays, n_samples = 4, 8
    us = rng.uniform(0, 47, n_rays)
    vs = rng.uniform(0, 35, n_rays)
    dirs_cam = np.stack([(us - 23.5) / 35.0, (vs - 17.5) / 35.0,
                         np.ones(n_rays)], axis=1)
    obs_depth = rng.uniform(1.0, 2.2, n_rays)
    obs_depth[0] = -1.0  # one ray without valid depth
    tr = 0.1
    depths, slot_valid = rnd.sample_depth_batch(
        obs_depth, 0.2, 3.2, n_samples - 3, 3, tr, rng,
    )
    obs_color = rng.uniform(0, 1, (n_rays, 3))
    xi = store.register("poses", "xi", rng.standard_normal(6) * 0.05)
    return MicroScene(
        store=store, atlas=atlas, field=field, xi=xi, base_pose=base_pose,
        dirs_cam=dirs_cam, depths=depths, slot_valid=slot_valid,
        obs_color=obs_color, obs_depth=obs_depth, truncation=tr,
        render_band=tr * tr, smooth_seed=seed + 7,
        weights=LossWeights(5.0, 0.1, 1000.0, 10.0, 1e-6),
    )


def check_full_loss(seeds, probes_per_param: int = 6) -> list[CheckResult]:
    """Criterion harness: full objective vs central differences per group."""
    worst = {"grids": 0.0, "decoders": 0.0, "poses": 0.0}
    for seed in seeds:
        scene = build_micro_scene(seed)
        tape = ad.Tape()
        loss = ad.run_forward(tape, scene.forward)
        ad.backward(tape, loss)
        prng = np.random.default_rng(seed + 1)
        for group in worst:
            for p in scene.store.parameters(group):
                if p.grad is None:
                    continue
                idx = _probe_indices(p, prng, probes_per_param)
                err = _fd_probe(scene.loss_value, p, idx)
                worst[group] = max(worst[group], err)
    return [CheckResult(f"full-loss/{g}", e) for g, e in worst.items()]


def check_op_families(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    # hash encode: table and position gradients
    cfg = HashGridConfig(2, 64, 2, 2, 4, 2.0)
    atlas = BlockAtlas(cfg, None)
    block = atlas.allocate([0.0, 0.0, 0.0], 0, rng)
    block.grid.table.data[:] = rng.uniform(-0.5, 0.5, block.grid.table.data.shape)
    xv = rng.uniform(0.1, 1.9, (6, 3))
    x = ad.Tensor(xv, requires_grad=True)
    w = rng.standard_normal((6, 4))

    def enc_forward():
        return ad.sum_(hash_encode(block.grid, ad.Tensor(x.data, True))
                       * ad.constant(w)).item()

    tape = ad.Tape()
    loss = ad.run_forward(tape, lambda: ad.sum_(hash_encode(block.grid, x) * ad.constant(w)))
    ad.backward(tape, loss)
    err_t = _fd_probe(enc_forward, block.grid.table,
                      _probe_indices(block.grid.table, rng))
    results.append(CheckResult("hash_encode/table", err_t))
    err_x = _fd_probe(enc_forward, x, range(x.data.size))
    results.append(CheckResult("hash_encode/position", err_x))

    # one-blob position gradient
    xb = ad.Tensor(rng.uniform(0.1, 1.9, (5, 3)), requires_grad=True)
    wb = rng.standard_normal((5, 48))

    def blob_forward():
        return ad.sum_(oneblob_encode(ad.Tensor(xb.data, True), 16, 2.0)
                       * ad.constant(wb)).item()

    tape = ad.Tape()
    loss = ad.run_forward(tape, lambda: ad.sum_(oneblob_encode(xb, 16, 2.0) * ad.constant(wb)))
    ad.backward(tape, loss)
    results.append(CheckResult("oneblob/position",
                               _fd_probe(blob_forward, xb, range(xb.data.size))))

    # MLP layer (affine + rectifier + logistic head)
    wmat = ad.Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    bias = ad.Tensor(rng.standard_normal(4), requires_grad=True)
    xin = ad.constant(rng.standard_normal((7, 6)))

    def mlp_forward():
        h = ad.relu(ad.matmul(xin, ad.Tensor(wmat.data, True)) + ad.Tensor(bias.data, True))
        return ad.sum_(ad.sigmoid(h)).item()

    tape = ad.Tape()
    loss = ad.run_forward(
        tape, lambda: ad.sum_(ad.sigmoid(ad.relu(ad.matmul(xin, wmat) + bias))))
    ad.backward(tape, loss)
    results.append(CheckResult("mlp/weights",
                               _fd_probe(mlp_forward, wmat, _probe_indices(wmat, rng))))
    results.append(CheckResult("mlp/bias",
                               _fd_probe(mlp_forward, bias, range(bias.data.size))))

    # rendering weights through depth/color aggregation
    sdf_v = rng.uniform(-0.2, 0.2, (3, 6))
    colors = rng.uniform(0, 1, (3, 6, 3))
    depths = np.sort(rng.uniform(0.5, 3.0, (3, 6)), axis=1)
    valid = rng.random((3, 6)) < 0.8
    valid[:, 0] = True
    sdf_t = ad.Tensor(sdf_v, requires_grad=True)
    wsum_w = rng.standard_normal(3)

    def render_forward():
        d, c, _ = rnd.render_batch(ad.Tensor(sdf_t.data, True), ad.constant(colors),
                                   depths, valid, 0.1)
        return (ad.sum_(d * ad.constant(wsum_w)) + ad.sum_(c)).item()

    tape = ad.Tape()
    d, c, _ = None, None, None

    def rb():
        d, c, _ = rnd.render_batch(sdf_t, ad.constant(colors), depths, valid, 0.1)
        return ad.sum_(d * ad.constant(wsum_w)) + ad.sum_(c)

    loss = ad.run_forward(tape, rb)
    ad.backward(tape, loss)
    results.append(CheckResult("render_weights/sdf",
                               _fd_probe(render_forward, sdf_t,
                                         _probe_indices(sdf_t, rng))))

    # each loss term on the micro scene, one group probe each
    scene = build_micro_scene(seed + 100)
    for name, extractor in [
        ("loss_color_depth", lambda sc, t: _loss_cd(sc)),
        ("loss_sdf", lambda sc, t: _loss_region(sc, "sdf")),
        ("loss_free_space", lambda sc, t: _loss_region(sc, "fs")),
        ("loss_smoothness", lambda sc, t: _loss_smooth(sc)),
    ]:
        sc = build_micro_scene(seed + 100)
        fwd = lambda: extractor(sc, None).item()
        tape = ad.Tape()
        loss = ad.run_forward(tape, lambda: extractor(sc, None))
        ad.backward(tape, loss)
        worst = 0.0
        prng = np.random.default_rng(seed + 3)
        for p in list(sc.store.parameters("grids")) + list(sc.store.parameters("decoders")):
            if p.grad is None:
                continue
            worst = max(worst, _fd_probe(fwd, p, _probe_indices(p, prng, 4)))
        results.append(CheckResult(name, worst))

    # pose-increment chain through the full objective
    scene = build_micro_scene(seed + 200)
    tape = ad.Tape()
    loss = ad.run_forward(tape, scene.forward)
    ad.backward(tape, loss)
    results.append(CheckResult("pose_increment/xi",
                               _fd_probe(scene.loss_value, scene.xi, range(6))))
    return results


def _scene_field_parts(sc: MicroScene):
    n, s = sc.depths.shape
    origin, dirs = pt.apply_increment_rays(sc.xi, sc.base_pose, sc.dirs_cam)
    pts = origin.reshape(1, 1, 3) \
        + ad.constant(sc.depths.reshape(n, s, 1)) * dirs.reshape(n, 1, 3)
    sdf, color, cov = query_points(pts.reshape(n * s, 3), sc.atlas.blocks,
                                   sc.field, train_field=True)
    valid = sc.slot_valid & (cov.reshape(n, s) > 0)
    return sdf.reshape(n, s), color.reshape(n, s, 3), valid


def _loss_cd(sc: MicroScene):
    sdf2, colors, valid = _scene_field_parts(sc)
    render_valid = rnd.first_surface_mask(sdf2.data, sc.depths, valid, sc.truncation)
    d_hat, c_hat, _ = rnd.render_batch(sdf2, colors, sc.depths, render_valid,
                                       sc.render_band)
    l_c, l_d = rnd.loss_color_depth(d_hat, c_hat, sc.obs_color, sc.obs_depth,
                                    valid.any(axis=1))
    return l_c + l_d


def _loss_region(sc: MicroScene, which: str):
    sdf2, _, valid = _scene_field_parts(sc)
    s_obs, r_tr, r_fs = rnd.sdf_region_masks(sc.depths, sc.obs_depth, valid,
                                             sc.truncation)
    if which == "sdf":
        return rnd.loss_sdf(sdf2, s_obs, r_tr)
    return rnd.loss_free_space(sdf2, r_fs, sc.truncation)


def _loss_smooth(sc: MicroScene):
    return rnd.loss_smoothness(sc.atlas, sc.field, 8, 0.05,
                               np.random.default_rng(sc.smooth_seed))


def run_gradcheck(seed: int = 0, n_seeds: int = 3) -> list[CheckResult]:
    """The cmd-level suite: op families plus the full loss over a few seeds."""
    results = check_op_families(seed)
    results += check_full_loss(range(seed, seed + n_seeds))
    return results
