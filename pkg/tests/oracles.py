"""Independent oracles shared by the test suite.

Everything here is deliberately tape-free, loop-heavy, and written straight
from definitions so it cannot share bugs with the vectorized implementation
paths it checks.
"""

import numpy as np


def central_diff(f, x, h=1e-4):
    """Central finite differences of scalar f at array x, elementwise."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        k = it.multi_index
        orig = x[k]
        x[k] = orig + h
        fp = f(x)
        x[k] = orig - h
        fm = f(x)
        x[k] = orig
        g[k] = (fp - fm) / (2.0 * h)
        it.iternext()
    return g


def rel_err(analytic, fd, floor=1e-6):
    """Elementwise relative error with an absolute floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    return np.abs(analytic - fd) / denom


def trilinear_weights(frac):
    """The 8 corner weights for a fractional position (3,) -> (8,)."""
    fx, fy, fz = frac
    w = np.zeros(8)
    for c in range(8):
        bx, by, bz = (c >> 2) & 1, (c >> 1) & 1, c & 1
        w[c] = (fx if bx else 1 - fx) * (fy if by else 1 - fy) * (fz if bz else 1 - fz)
    return w


def segment_triangle_oracle_distance(p, tri):
    """Exact point-to-triangle distance by dense barycentric sampling plus
    vertex/edge checks. Slow; used only on tiny fixtures."""
    a, b, c = tri
    best = min(np.linalg.norm(p - a), np.linalg.norm(p - b), np.linalg.norm(p - c))
    n = 200
    for i in range(n + 1):
        for j in range(n + 1 - i):
            u = i / n
            v = j / n
            q = a + u * (b - a) + v * (c - a)
            d = np.linalg.norm(p - q)
            if d < best:
                best = d
    return best


def point_triangle_distance_exact(p, tri):
    """Exact point-to-triangle distance (region-based closed form)."""
    a, b, c = [np.asarray(v, dtype=np.float64) for v in tri]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0 and d2 <= 0:
        return np.linalg.norm(p - a)
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0 and d4 <= d3:
        return np.linalg.norm(p - b)
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        t = d1 / (d1 - d3)
        return np.linalg.norm(p - (a + t * ab))
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0 and d5 <= d6:
        return np.linalg.norm(p - c)
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        t = d2 / (d2 - d6)
        return np.linalg.norm(p - (a + t * ac))
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return np.linalg.norm(p - (b + t * (c - b)))
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return np.linalg.norm(p - (a + ab * v + ac * w))


def brute_force_mesh_distance(points, vertices, faces):
    """Distance from each point to the nearest triangle, all pairs."""
    out = np.empty(len(points))
    for i, p in enumerate(points):
        best = np.inf
        for f in faces:
            d = point_triangle_distance_exact(p, vertices[f])
            if d < best:
                best = d
        out[i] = best
    return out


def sat_cube_frustum_intersects(center, half, frustum_verts):
    """Exact separating-axis test between an axis-aligned cube and the convex
    hull of 8 frustum vertices.

    Candidate axes: 3 cube face normals, frustum face normals, and cross
    products of cube edges with frustum edges.
    """
    from itertools import combinations
    from scipy.spatial import ConvexHull

    cube = np.array(
        [center + half * np.array([sx, sy, sz])
         for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    )
    fv = np.asarray(frustum_verts, dtype=np.float64)

    axes = [np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])]
    hull = ConvexHull(fv, qhull_options="QJ")
    for eq in hull.equations:
        axes.append(eq[:3])
    # frustum edges from the hull simplices
    edges = set()
    for simplex in hull.simplices:
        for i, j in combinations(simplex, 2):
            edges.add((min(i, j), max(i, j)))
    cube_edges = [np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])]
    for (i, j) in edges:
        e = fv[j] - fv[i]
        for ce in cube_edges:
            cr = np.cross(e, ce)
            n = np.linalg.norm(cr)
            if n > 1e-12:
                axes.append(cr / n)

    for axis in axes:
        c0 = cube @ axis
        f0 = fv @ axis
        if c0.max() < f0.min() - 1e-12 or f0.max() < c0.min() - 1e-12:
            return False
    return True
