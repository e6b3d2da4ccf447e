"""Mesh extraction with culling and the reconstruction/trajectory metrics.

Meshes come from marching cubes over the blended SDF inside the union of
block cubes. Metrics: ATE RMSE after closed-form rigid alignment, depth L1
between rendered views of two geometries, and accuracy / completion /
completion-ratio from area-weighted surface samples with exact
point-to-triangle distances (a KD-tree over triangle centroids prunes
candidates without changing the result).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .errors import ContractViolation, DataError
from .geometry import Intrinsics, Pose, project_points

TRI_EPS = 1e-12


@dataclass
class Mesh:
    vertices: np.ndarray            # (n, 3) float
    faces: np.ndarray               # (m, 3) int
    colors: np.ndarray | None = None  # (n, 3) in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and self.faces.max() >= len(self.vertices):
            raise ContractViolation("face index out of range")
        if len(self.vertices) and not np.all(np.isfinite(self.vertices)):
            raise ContractViolation("mesh vertices must be finite")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class MetricReport:
    ate_rmse_cm: float = float("nan")
    depth_l1_cm: float = float("nan")
    acc_cm: float = float("nan")
    comp_cm: float = float("nan")
    comp_ratio_pct: float = float("nan")
    runtime_s: float = float("nan")

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("ate_rmse_cm", self.ate_rmse_cm),
            ("depth_l1_cm", self.depth_l1_cm),
            ("acc_cm", self.acc_cm),
            ("comp_cm", self.comp_cm),
            ("comp_ratio_pct", self.comp_ratio_pct),
            ("runtime_s", self.runtime_s),
        ]

    def text(self) -> str:
        return "\n".join(f"{k:>16}: {v:.4f}" for k, v in self.rows())

    def csv(self) -> str:
        keys, vals = zip(*self.rows())
        return ",".join(keys) + "\n" + ",".join(f"{v:.9g}" for v in vals) + "\n"


class _GridField:
    """Adapter: evaluate a neural field (or any sdf callable) on points."""

    def __init__(self, query_fn):
        self.query_fn = query_fn

    def __call__(self, pts: np.ndarray):
        return self.query_fn(pts)


def field_query_adapter(atlas, field):
    """Neural-field query for meshing: (points) -> (sdf, coverage, colors)."""
    from .field import query_points

    def q(pts):
        sdf, color, cov = query_points(pts, atlas.blocks, field, train_field=False)
        return sdf.data, cov, color.data

    return q


def extract_mesh(query_fn, atlas, voxel: float, chunk: int = 200_000) -> Mesh:
    """Marching cubes at ``voxel`` pitch over the union of block cubes.

    ``query_fn(points) -> (sdf, coverage, colors-or-None)``; voxels with
    coverage 0 are masked out of the triangulation. Shared vertices are
    welded within 1e-6 m.
    """
    if not len(atlas.blocks):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    half = atlas.block_size / 2.0
    centers = np.array([b.center for b in atlas.blocks])
    lo = (centers - half).min(axis=0) - voxel
    hi = (centers + half).max(axis=0) + voxel
    dims = np.maximum(np.ceil((hi - lo) / voxel).astype(int) + 1, 2)
    xs = lo[0] + voxel * np.arange(dims[0])
    ys = lo[1] + voxel * np.arange(dims[1])
    zs = lo[2] + voxel * np.arange(dims[2])
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    sdf = np.full(len(pts), np.inf)
    cov = np.zeros(len(pts), dtype=np.int64)
    inside = atlas.coverage_count(pts) > 0
    idx = np.nonzero(inside)[0]
    for start in range(0, len(idx), chunk):
        sel = idx[start:start + chunk]
        s, c, _ = query_fn(pts[sel])
        sdf[sel] = s
        cov[sel] = c
    vol = sdf.reshape(dims)
    mask = (cov > 0).reshape(dims)
    if not (vol[mask] < 0).any() or not (vol[mask] > 0).any():
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    # marching_cubes requires finite values everywhere it looks; park
    # uncovered corners at a positive constant, the mask excludes their cells
    vol = np.where(mask, vol, 1.0)
    try:
        verts, faces, _, _ = measure.marching_cubes(
            vol, level=0.0, spacing=(voxel, voxel, voxel), mask=mask,
        )
    except (ValueError, RuntimeError):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts = verts + lo
    verts, faces = _weld_vertices(verts, faces, tol=1e-6)
    colors = None
    s, c, col = query_fn(verts)
    if col is not None:
        colors = np.clip(col, 0.0, 1.0)
        colors[c == 0] = 0.5
    return Mesh(verts, faces, colors)


def _weld_vertices(verts: np.ndarray, faces: np.ndarray, tol: float):
    key = np.round(verts / tol).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    new_faces = inverse[faces]
    keep = new_faces[:, 0] != new_faces[:, 1]
    keep &= new_faces[:, 1] != new_faces[:, 2]
    keep &= new_faces[:, 0] != new_faces[:, 2]
    return verts[first], new_faces[keep]


def cull_mesh(mesh: Mesh, trajectory: list[Pose], k: Intrinsics,
              depth_frames: list[np.ndarray], tr: float = 0.1,
              near: float = 0.01, far: float = 100.0) -> Mesh:
    """Remove triangles never observed by the trajectory.

    A vertex counts as observed in a frame when it projects inside the image
    with depth in range and lies no farther than the measured depth + tr at
    its pixel. A triangle stays when at least one vertex is observed in at
    least one frame.
    """
    if mesh.is_empty:
        return mesh
    seen = np.zeros(len(mesh.vertices), dtype=bool)
    for pose, depth_img in zip(trajectory, depth_frames):
        todo = ~seen
        if not todo.any():
            break
        uv, z, in_front = project_points(pose, k, mesh.vertices[todo])
        u, v = uv[:, 0], uv[:, 1]
        ok = in_front & (z >= near) & (z <= far)
        ok &= (u >= 0) & (u <= k.width - 1) & (v >= 0) & (v <= k.height - 1)
        if not ok.any():
            continue
        ui = np.clip(np.round(np.where(ok, u, 0)).astype(int), 0, k.width - 1)
        vi = np.clip(np.round(np.where(ok, v, 0)).astype(int), 0, k.height - 1)
        measured = depth_img[vi, ui]
        ok &= (measured > 0) & (z <= measured + tr)
        idx = np.nonzero(todo)[0]
        seen[idx[ok]] = True
    keep_face = seen[mesh.faces].any(axis=1)
    return _compact(mesh, keep_face)


def _compact(mesh: Mesh, keep_face: np.ndarray) -> Mesh:
    faces = mesh.faces[keep_face]
    used = np.unique(faces)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    colors = mesh.colors[used] if mesh.colors is not None else None
    return Mesh(mesh.vertices[used], remap[faces], colors)


# -- trajectory metric -----------------------------------------------------

def align_rigid(est: np.ndarray, gt: np.ndarray):
    """Closed-form rotation+translation minimizing |R e + t - g|^2 (no scale)."""
    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    cov = (gt - mu_g).T @ (est - mu_e) / len(est)
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u @ vt) < 0:
        s[2, 2] = -1.0
    r = u @ s @ vt
    t = mu_g - r @ mu_e
    return r, t


def ate_rmse(est: list[tuple[float, Pose]], gt: list[tuple[float, Pose]],
             max_dt: float = 0.02) -> float:
    """Absolute trajectory error RMSE in centimeters after rigid alignment."""
    from .dataio import associate

    pairs = associate([t for t, _ in est], [t for t, _ in gt], max_dt)
    if len(pairs) < 3:
        raise DataError(f"need at least 3 associated pose pairs, got {len(pairs)}")
    e = np.array([est[i][1].translation for i, _ in pairs])
    g = np.array([gt[j][1].translation for _, j in pairs])
    r, t = align_rigid(e, g)
    resid = (e @ r.T + t) - g
    return float(np.sqrt((resid ** 2).sum(axis=1).mean()) * 100.0)


# -- depth L1 ---------------------------------------------------------------

def rasterize_depth(mesh: Mesh, pose: Pose, k: Intrinsics) -> np.ndarray:
    """Z-buffer rasterization of the mesh into a depth image (0 = hole)."""
    depth = np.zeros((k.height, k.width))
    if mesh.is_empty:
        return depth
    zbuf = np.full((k.height, k.width), np.inf)
    cam = (mesh.vertices - pose.translation) @ pose.rotation  # camera frame
    tri = cam[mesh.faces]  # (m, 3, 3)
    in_front = (tri[:, :, 2] > 1e-6).all(axis=1)
    for t in tri[in_front]:
        z = t[:, 2]
        u = k.fx * t[:, 0] / z + k.cx
        v = k.fy * t[:, 1] / z + k.cy
        lo_u = max(int(np.ceil(u.min())), 0)
        hi_u = min(int(np.floor(u.max())), k.width - 1)
        lo_v = max(int(np.ceil(v.min())), 0)
        hi_v = min(int(np.floor(v.max())), k.height - 1)
        if lo_u > hi_u or lo_v > hi_v:
            continue
        gu, gv = np.meshgrid(np.arange(lo_u, hi_u + 1), np.arange(lo_v, hi_v + 1))
        pu = gu.ravel().astype(np.float64)
        pv = gv.ravel().astype(np.float64)
        # barycentric in pixel space, perspective-correct via 1/z interpolation
        x0, y0 = u[0], v[0]
        d1 = np.array([u[1] - x0, v[1] - y0])
        d2 = np.array([u[2] - x0, v[2] - y0])
        den = d1[0] * d2[1] - d1[1] * d2[0]
        if abs(den) < TRI_EPS:
            continue
        px = pu - x0
        py = pv - y0
        b1 = (px * d2[1] - py * d2[0]) / den
        b2 = (py * d1[0] - px * d1[1]) / den
        b0 = 1.0 - b1 - b2
        inside = (b0 >= -1e-9) & (b1 >= -1e-9) & (b2 >= -1e-9)
        if not inside.any():
            continue
        inv_z = b0 * (1.0 / z[0]) + b1 * (1.0 / z[1]) + b2 * (1.0 / z[2])
        zi = 1.0 / inv_z
        uu = gu.ravel()[inside]
        vv = gv.ravel()[inside]
        zi = zi[inside]
        better = zi < zbuf[vv, uu]
        zbuf[vv[better], uu[better]] = zi[better]
    hit = np.isfinite(zbuf)
    depth[hit] = zbuf[hit]
    return depth


def sample_free_views(scene, n_views: int, rng: np.random.Generator,
                      margin: float = 0.3, max_tries_factor: int = 10):
    """Random poses at free-space points looking toward the scene centroid."""
    from .synthetic import look_at_pose

    lo = np.asarray(scene.extent[0])
    hi = np.asarray(scene.extent[1])
    center = (lo + hi) / 2.0
    views = []
    tries = 0
    limit = max_tries_factor * n_views
    while len(views) < n_views and tries < limit:
        tries += 1
        p = rng.uniform(lo, hi)
        if scene.sdf(p.reshape(1, 3))[0] <= margin:
            continue
        jitter = rng.uniform(-0.4, 0.4, 3)
        views.append(look_at_pose(p, center + jitter))
    if len(views) < n_views:
        raise DataError(f"could not find {n_views} free-space views in {limit} tries")
    return views


def depth_l1(rec_mesh: Mesh, gt_mesh: Mesh, scene, k: Intrinsics, n_views: int,
             rng: np.random.Generator, hole_fraction: float = 0.10,
             max_tries_factor: int = 10) -> float:
    """Mean |depth difference| in cm over accepted virtual views.

    Views where either render has holes over more than ``hole_fraction`` of
    pixels are rejected and resampled.
    """
    if rec_mesh.is_empty or gt_mesh.is_empty:
        raise DataError("depth_l1 needs two nonempty geometries")
    accepted = 0
    total = 0.0
    tries = 0
    limit = max_tries_factor * max(n_views, 1)
    while accepted < n_views:
        if tries >= limit:
            raise DataError(
                f"could not find {n_views} valid views in {limit} attempts")
        batch = sample_free_views(scene, 1, rng)
        tries += 1
        pose = batch[0]
        d_rec = rasterize_depth(rec_mesh, pose, k)
        d_gt = rasterize_depth(gt_mesh, pose, k)
        n_px = d_rec.size
        if (d_rec == 0).sum() > hole_fraction * n_px:
            continue
        if (d_gt == 0).sum() > hole_fraction * n_px:
            continue
        both = (d_rec > 0) & (d_gt > 0)
        if not both.any():
            continue
        total += np.abs(d_rec[both] - d_gt[both]).mean()
        accepted += 1
    return float(total / n_views * 100.0)


# -- accuracy / completion ---------------------------------------------------

def sample_mesh_points(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform surface samples."""
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise DataError("mesh has zero surface area")
    which = rng.choice(len(areas), size=n, p=areas / total)
    a = mesh.vertices[mesh.faces[which, 0]]
    b = mesh.vertices[mesh.faces[which, 1]]
    c = mesh.vertices[mesh.faces[which, 2]]
    r1 = rng.random(n)
    r2 = rng.random(n)
    flip = r1 + r2 > 1.0
    r1[flip] = 1.0 - r1[flip]
    r2[flip] = 1.0 - r2[flip]
    return a + r1[:, None] * (b - a) + r2[:, None] * (c - a)


def point_triangle_distances(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Exact distances from points[i] to triangle tri[i] (paired, vectorized)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    ap = points - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = points - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = points - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    closest = np.empty_like(points)
    done = np.zeros(len(points), dtype=bool)

    m = (d1 <= 0) & (d2 <= 0)
    closest[m] = a[m]
    done |= m
    m = ~done & (d3 >= 0) & (d4 <= d3)
    closest[m] = b[m]
    done |= m
    m = ~done & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    t = np.divide(d1, d1 - d3, out=np.zeros_like(d1), where=(d1 - d3) != 0)
    closest[m] = a[m] + t[m, None] * ab[m]
    done |= m
    m = ~done & (d6 >= 0) & (d5 <= d6)
    closest[m] = c[m]
    done |= m
    m = ~done & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    t = np.divide(d2, d2 - d6, out=np.zeros_like(d2), where=(d2 - d6) != 0)
    closest[m] = a[m] + t[m, None] * ac[m]
    done |= m
    m = ~done & (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    denom = (d4 - d3) + (d5 - d6)
    t = np.divide(d4 - d3, denom, out=np.zeros_like(d4), where=denom != 0)
    closest[m] = b[m] + t[m, None] * (c[m] - b[m])
    done |= m
    m = ~done
    denom = va + vb + vc
    v = np.divide(vb, denom, out=np.zeros_like(vb), where=denom != 0)
    w = np.divide(vc, denom, out=np.zeros_like(vc), where=denom != 0)
    closest[m] = a[m] + v[m, None] * ab[m] + w[m, None] * ac[m]
    return np.linalg.norm(points - closest, axis=1)


class MeshDistanceIndex:
    """Exact nearest point-to-mesh distance with KD-tree candidate pruning.

    The tree holds triangle centroids; a query first measures the triangle
    under the nearest centroid (upper bound d0), then tests every triangle
    whose centroid lies within d0 + r_max, where r_max bounds centroid-to-
    farthest-vertex over the mesh. The pruning is lossless.
    """

    def __init__(self, mesh: Mesh):
        if mesh.is_empty:
            raise DataError("cannot index an empty mesh")
        self.tri = mesh.vertices[mesh.faces]
        self.centroids = self.tri.mean(axis=1)
        self.r_max = float(
            np.linalg.norm(self.tri - self.centroids[:, None, :], axis=2).max()
        )
        self.tree = cKDTree(self.centroids)

    def distances(self, points: np.ndarray, batch: int = 2048) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(points))
        for start in range(0, len(points), batch):
            sel = slice(start, min(start + batch, len(points)))
            out[sel] = self._distances_batch(points[sel])
        return out

    def _distances_batch(self, pts: np.ndarray) -> np.ndarray:
        _, nearest = self.tree.query(pts)
        d0 = point_triangle_distances(pts, self.tri[nearest])
        radii = d0 + self.r_max + 1e-12
        groups = self.tree.query_ball_point(pts, radii)
        out = np.empty(len(pts))
        for i, cand in enumerate(groups):
            cand = np.asarray(cand)
            ds = point_triangle_distances(
                np.broadcast_to(pts[i], (len(cand), 3)), self.tri[cand]
            )
            out[i] = ds.min()
        return out


def acc_comp(rec_mesh: Mesh, gt_mesh: Mesh, n_pts: int, threshold: float,
             rng: np.random.Generator):
    """Accuracy (cm), completion (cm), completion ratio (%).

    Accuracy: mean distance from reconstruction samples to the GT mesh.
    Completion: mean distance from GT samples to the reconstruction.
    Completion ratio: fraction of GT samples within ``threshold`` of the
    reconstruction.
    """
    if rec_mesh.is_empty or gt_mesh.is_empty:
        raise DataError("acc_comp needs two nonempty meshes")
    rec_pts = sample_mesh_points(rec_mesh, n_pts, rng)
    gt_pts = sample_mesh_points(gt_mesh, n_pts, rng)
    d_rec_to_gt = MeshDistanceIndex(gt_mesh).distances(rec_pts)
    d_gt_to_rec = MeshDistanceIndex(rec_mesh).distances(gt_pts)
    acc = float(d_rec_to_gt.mean() * 100.0)
    comp = float(d_gt_to_rec.mean() * 100.0)
    ratio = float((d_gt_to_rec < threshold).mean() * 100.0)
    return acc, comp, ratio
