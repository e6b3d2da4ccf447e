"""Ray sampling, SDF-weighted volume rendering, and the training losses.

Rendering weights come from the product of two logistic curves of the SDF,
peaked at the surface: w = sigmoid(s/tr) * sigmoid(-s/tr). Depth and color
along a ray are weight-averaged sample values (not alpha compositing).
Samples outside every block are excluded from rendering and from every loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation
from .field import NeuralField, query_points
from .geometry import Ray

log = logging.getLogger(__name__)

WEIGHT_EPS = 1e-10  # denominator guard for nearly-empty rays


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for color, depth, sdf, free-space, and smoothness terms."""

    color: float = 5.0
    depth: float = 0.1
    sdf: float = 1000.0
    free_space: float = 10.0
    smooth: float = 1e-6

    def __post_init__(self):
        if min(self.color, self.depth, self.sdf, self.free_space, self.smooth) < 0:
            raise ContractViolation("loss weights must be nonnegative")


@dataclass
class RaySamples:
    """Samples along one ray: ascending depths, world points, validity."""

    ray: Ray
    depths: np.ndarray        # (m,) strictly ascending
    points: np.ndarray        # (m, 3)
    valid: np.ndarray         # (m,) bool, block coverage >= 1


@dataclass
class RenderResult:
    depth_hat: float
    color_hat: np.ndarray
    weight_sum: float
    low_confidence: bool = False


def stratified_depths(near: float, far: float, n1: int, rng: np.random.Generator,
                      n_rays: int = 1) -> np.ndarray:
    """One uniform sample per stratum of [near, far), shape (n_rays, n1)."""
    if not near < far:
        raise ContractViolation("near must be less than far")
    if n1 < 1:
        raise ContractViolation("need at least one uniform sample")
    edges = near + (far - near) * np.arange(n1) / n1
    width = (far - near) / n1
    return edges[None, :] + width * rng.random((n_rays, n1))


def surface_depths(sensor_depth: np.ndarray, near: float, far: float, n2: int,
                   tr: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """n2 uniform samples in [d - tr, d + tr] clamped to [near, far].

    Returns (depths (n, n2), usable (n,) bool). Rays whose clamped interval is
    empty (or with invalid sensor depth) are flagged unusable.
    """
    d = np.asarray(sensor_depth, dtype=np.float64)
    lo = np.maximum(near, d - tr)
    hi = np.minimum(far, d + tr)
    usable = (d > 0.0) & (lo < hi)
    lo_safe = np.where(usable, lo, near)
    hi_safe = np.where(usable, hi, far)
    u = rng.random((len(d), n2))
    return lo_safe[:, None] + (hi_safe - lo_safe)[:, None] * u, usable


def sample_depth_batch(sensor_depth: np.ndarray, near: float, far: float,
                       n1: int, n2: int, tr: float, rng: np.random.Generator):
    """Merged, per-ray sorted sample depths for a batch.

    Returns (depths (n, n1+n2), slot_valid (n, n1+n2)). For rays without a
    usable sensor depth the n2 surface slots are masked out (and parked at
    ``far`` so downstream geometry stays finite).
    """
    n = len(sensor_depth)
    uni = stratified_depths(near, far, n1, rng, n_rays=n)
    surf, usable = surface_depths(sensor_depth, near, far, n2, tr, rng)
    depths = np.concatenate([uni, surf], axis=1)
    slot_valid = np.ones((n, n1 + n2), dtype=bool)
    slot_valid[:, n1:] = usable[:, None]
    depths = np.where(slot_valid, depths, np.inf)
    order = np.argsort(depths, axis=1)
    depths = np.take_along_axis(depths, order, axis=1)
    slot_valid = np.take_along_axis(slot_valid, order, axis=1)
    depths[~slot_valid] = far
    return depths, slot_valid


def sample_ray(ray: Ray, sensor_depth: float | None, near: float, far: float,
               n1: int, n2: int, tr: float, rng: np.random.Generator,
               atlas=None) -> RaySamples:
    """Samples along a single ray; validity mask from block coverage."""
    has_depth = sensor_depth is not None and sensor_depth > 0.0
    uni = stratified_depths(near, far, n1, rng)[0]
    if has_depth:
        surf, usable = surface_depths(np.array([sensor_depth]), near, far, n2, tr, rng)
        depths = np.sort(np.concatenate([uni, surf[0]])) if usable[0] else np.sort(uni)
    else:
        depths = np.sort(uni)
    points = ray.at(depths)
    if atlas is not None and len(atlas):
        valid = atlas.covered_mask(points)
    else:
        valid = np.ones(len(depths), dtype=bool)
    return RaySamples(ray=ray, depths=depths, points=points, valid=valid)


def render_weights(sdf: Tensor, tr: float) -> Tensor:
    """The two-sigmoid bell of the SDF: symmetric, peaked at the surface."""
    s = sdf * (1.0 / tr)
    return ad.sigmoid(s) * ad.sigmoid(-s)


def first_surface_mask(sdf_values: np.ndarray, depths: np.ndarray,
                       valid: np.ndarray, tr: float) -> np.ndarray:
    """Keep samples up to one truncation band behind the first surface.

    The first surface on a ray is the first valid sample whose SDF turns
    negative after a valid nonnegative sample; everything more than ``tr``
    beyond that depth is masked out of rendering (it is occluded, carries no
    supervision, and would otherwise contaminate the weighted averages).
    Rays with no sign change are untouched. The mask is a function of SDF
    values only and carries no gradient.
    """
    n, m = sdf_values.shape
    neg = valid & (sdf_values < 0.0)
    # index of the latest valid sample strictly before j (-1 if none)
    idx = np.where(valid, np.arange(m)[None, :], -1)
    prior_idx = np.concatenate(
        [np.full((n, 1), -1, dtype=np.int64),
         np.maximum.accumulate(idx, axis=1)[:, :-1]], axis=1,
    )
    rows = np.arange(n)[:, None]
    prior_nonneg = np.where(
        prior_idx >= 0, sdf_values[rows, np.maximum(prior_idx, 0)] >= 0.0, False
    )
    crossing = neg & prior_nonneg
    any_crossing = crossing.any(axis=1)
    first_j = np.where(any_crossing, crossing.argmax(axis=1), 0)
    cut_depth = np.where(any_crossing, depths[np.arange(n), first_j] + tr, np.inf)
    return valid & (depths <= cut_depth[:, None])


def render_batch(sdf: Tensor, colors: Tensor, depths: np.ndarray,
                 valid: np.ndarray, tr: float):
    """Volume rendering over a (n_rays, n_samples) batch.

    ``sdf`` is (n, s) on the tape, ``colors`` (n, s, 3), ``depths`` and the
    boolean ``valid`` mask are constants. Returns (depth_hat (n,),
    color_hat (n, 3), weight_sum (n,)); rays with no valid sample render to
    the epsilon-guarded ratio and must be masked by the loss stage.
    """
    mask = ad.constant(valid.astype(np.float64))
    w = render_weights(sdf, tr) * mask
    wsum = w.sum(axis=1)
    denom = 1.0 / (wsum + WEIGHT_EPS)
    depth_hat = (w * ad.constant(depths)).sum(axis=1) * denom
    color_hat = (w.reshape(*w.shape, 1) * colors).sum(axis=1) * denom.reshape(-1, 1)
    return depth_hat, color_hat, wsum


def render_ray(samples: RaySamples, blocks, field: NeuralField, tr: float,
               cut_margin: float | None = None) -> RenderResult | None:
    """Render a single ray in evaluation mode. None when every sample is
    invalid (the ray is dropped from losses)."""
    if not samples.valid.any():
        return None
    sdf, color, coverage = query_points(samples.points, blocks, field,
                                        train_field=False)
    valid = samples.valid & (coverage > 0)
    if not valid.any():
        return None
    render_valid = first_surface_mask(
        sdf.data.reshape(1, -1), samples.depths[None, :], valid[None, :],
        tr if cut_margin is None else cut_margin,
    )
    d_hat, c_hat, wsum = render_batch(
        sdf.reshape(1, -1), color.reshape(1, -1, 3),
        samples.depths[None, :], render_valid, tr,
    )
    ws = float(wsum.data[0])
    return RenderResult(
        depth_hat=float(d_hat.data[0]),
        color_hat=c_hat.data[0].copy(),
        weight_sum=ws,
        low_confidence=ws < WEIGHT_EPS,
    )


def _masked_ray_mean(per_ray: Tensor, ray_mask: np.ndarray) -> Tensor:
    count = int(ray_mask.sum())
    if count == 0:
        return ad.constant(0.0)
    return (per_ray * ad.constant(ray_mask.astype(np.float64))).sum() * (1.0 / count)


def loss_color_depth(depth_hat: Tensor, color_hat: Tensor,
                     obs_color: np.ndarray, obs_depth: np.ndarray,
                     rendered: np.ndarray):
    """Mean squared color error over rendered rays; mean squared depth error
    over rendered rays with valid sensor depth.

    The color convention: squared error summed over the 3 channels, then
    averaged over rays.
    """
    c_err = ad.square(color_hat - ad.constant(obs_color)).sum(axis=1)
    l_c = _masked_ray_mean(c_err, rendered)
    depth_ok = rendered & (obs_depth > 0.0)
    if not depth_ok.any():
        log.warning("no rays with valid sensor depth in batch; depth loss = 0")
        return l_c, ad.constant(0.0)
    d_err = ad.square(depth_hat - ad.constant(obs_depth))
    l_d = _masked_ray_mean(d_err, depth_ok)
    return l_c, l_d


def sdf_region_masks(sample_depths: np.ndarray, sensor_depth: np.ndarray,
                     valid: np.ndarray, tr: float):
    """Split samples of valid-depth rays into truncation and free-space sets.

    Truncation: |sensor - d| <= tr. Free space: in front of the surface by
    more than tr (d < sensor - tr). Samples behind the surface beyond the
    truncation band belong to neither and are dropped from these losses.
    """
    has_depth = (sensor_depth > 0.0)[:, None]
    s_obs = sensor_depth[:, None] - sample_depths
    region_tr = valid & has_depth & (np.abs(s_obs) <= tr)
    region_fs = valid & has_depth & (s_obs > tr)
    return s_obs, region_tr, region_fs


def _per_ray_region_mean(err: Tensor, region: np.ndarray) -> Tensor:
    counts = region.sum(axis=1)
    nonempty = counts > 0
    inv = np.zeros(len(counts))
    inv[nonempty] = 1.0 / counts[nonempty]
    per_ray = (err * ad.constant(region.astype(np.float64))).sum(axis=1) * ad.constant(inv)
    return _masked_ray_mean(per_ray, nonempty)


def loss_sdf(sdf_pred: Tensor, s_obs: np.ndarray, region_tr: np.ndarray) -> Tensor:
    """Squared error against the observed truncated SDF, per-ray averaged
    over the truncation region, then averaged over rays with a nonempty
    region."""
    err = ad.square(ad.constant(s_obs) - sdf_pred)
    return _per_ray_region_mean(err, region_tr)


def loss_free_space(sdf_pred: Tensor, region_fs: np.ndarray, tr: float) -> Tensor:
    """Pull free-space predictions to the truncation distance."""
    err = ad.square(sdf_pred - tr)
    return _per_ray_region_mean(err, region_fs)


def loss_smoothness(atlas, field: NeuralField, n_points: int, eps: float,
                    rng: np.random.Generator, train_field: bool = True) -> Tensor:
    """Feature-space smoothness over random in-block positions.

    For each point the blended hash features are compared against positions
    offset by one fine-grid cell along +x/+y/+z; the mean over points of the
    summed squared differences is returned. Points are drawn inside a random
    block with an eps margin so each offset stays inside that same block.
    """
    if n_points < 1:
        raise ContractViolation("n_points must be >= 1")
    if len(atlas) == 0:
        return ad.constant(0.0)
    b = atlas.block_size
    which = rng.integers(0, len(atlas), size=n_points)
    local = rng.uniform(0.0, b - eps, size=(n_points, 3))
    centers = np.array([atlas.blocks[i].center for i in which])
    base = centers - b / 2.0 + local
    offs = np.concatenate([
        base,
        base + np.array([eps, 0.0, 0.0]),
        base + np.array([0.0, eps, 0.0]),
        base + np.array([0.0, 0.0, eps]),
    ])
    from .field import blend_features  # local import to avoid cycle at module load

    feats, _ = blend_features(ad.constant(offs), atlas.blocks, train_field=train_field)
    f0 = feats[0:n_points]
    total = None
    for k in range(1, 4):
        dk = feats[k * n_points:(k + 1) * n_points] - f0
        term = ad.square(dk).sum()
        total = term if total is None else total + term
    return total * (1.0 / n_points)


def loss_total(l_color: Tensor, l_depth: Tensor, l_sdf: Tensor, l_fs: Tensor,
               l_smooth: Tensor, weights: LossWeights) -> Tensor:
    return (
        l_color * weights.color
        + l_depth * weights.depth
        + l_sdf * weights.sdf
        + l_fs * weights.free_space
        + l_smooth * weights.smooth
    )
