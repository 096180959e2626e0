"""Small vectorised geometry kernels shared by hierarchy building and rasterisation."""
from __future__ import annotations

import numpy as np

# fixed sub-voxel offset applied to every cast ray so grid-aligned rays never
# hit a mesh edge or vertex exactly
RAY_JITTER = np.array([1.1102230246251565e-09, 2.3283064365386963e-09])


def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere; 2 + 10 * 4**n vertices, outward-oriented faces."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
             [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
             [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
             [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [list(np.array(v, float) / np.linalg.norm(v)) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = (np.array(verts[a]) + np.array(verts[b])) / 2.0
                verts.append(list(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64)


def signed_volumes(coords: np.ndarray, tetras: np.ndarray) -> np.ndarray:
    p = coords[tetras]
    return np.einsum("ij,ij->i", np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), p[:, 3] - p[:, 0]) / 6.0


def mesh_volume(coords: np.ndarray, faces: np.ndarray) -> float:
    """Enclosed volume of a closed, outward-oriented triangle surface."""
    p = coords[faces]
    return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)


def closest_point_barycentric(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Closest point on each triangle (a, b, c) to the point ``p``.

    Returns barycentric weights (T, 3) and squared distances (T,).
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    T = len(a)
    bary = np.zeros((T, 3))
    done = np.zeros(T, bool)

    def assign(mask, w):
        nonlocal done
        m = mask & ~done
        bary[m] = w[m] if w.ndim == 2 else w
        done |= m

    tiny = 1e-300
    assign((d1 <= 0) & (d2 <= 0), np.array([1.0, 0.0, 0.0]))
    assign((d3 >= 0) & (d4 <= d3), np.array([0.0, 1.0, 0.0]))
    v = d1 / np.where(np.abs(d1 - d3) > tiny, d1 - d3, 1.0)
    assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), np.stack([1 - v, v, np.zeros(T)], 1))
    assign((d6 >= 0) & (d5 <= d6), np.array([0.0, 0.0, 1.0]))
    w = d2 / np.where(np.abs(d2 - d6) > tiny, d2 - d6, 1.0)
    assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), np.stack([1 - w, np.zeros(T), w], 1))
    den = (d4 - d3) + (d5 - d6)
    w = (d4 - d3) / np.where(np.abs(den) > tiny, den, 1.0)
    assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), np.stack([np.zeros(T), 1 - w, w], 1))
    den = va + vb + vc
    den = np.where(np.abs(den) > tiny, den, 1.0)
    v, w = vb / den, vc / den
    assign(np.ones(T, bool), np.stack([1 - v - w, v, w], 1))
    q = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return bary, np.einsum("ij,ij->i", q - p, q - p)


def ray_crossings(vertices: np.ndarray, faces: np.ndarray, ys: np.ndarray, zs: np.ndarray):
    """Intersect rays parallel to +x at (y, z) positions with a triangle soup.

    ``ys`` and ``zs`` are 1-D grid coordinates; every (y, z) pair is a ray.
    Returns (ray index into the ys x zs grid, crossing x) arrays.
    """
    ny, nz = len(ys), len(zs)
    if len(faces) == 0 or ny == 0 or nz == 0:
        return np.zeros(0, np.int64), np.zeros(0)
    tri = vertices[faces]  # (T, 3, 3)
    y = tri[:, :, 1] - RAY_JITTER[0]
    z = tri[:, :, 2] - RAY_JITTER[1]
    dy, dz = ys[1] - ys[0] if ny > 1 else 1.0, zs[1] - zs[0] if nz > 1 else 1.0
    iy0 = np.clip(np.ceil((y.min(1) - ys[0]) / dy), 0, ny).astype(np.int64)
    iy1 = np.clip(np.floor((y.max(1) - ys[0]) / dy) + 1, 0, ny).astype(np.int64)
    iz0 = np.clip(np.ceil((z.min(1) - zs[0]) / dz), 0, nz).astype(np.int64)
    iz1 = np.clip(np.floor((z.max(1) - zs[0]) / dz) + 1, 0, nz).astype(np.int64)
    cy, cz = np.maximum(iy1 - iy0, 0), np.maximum(iz1 - iz0, 0)
    counts = cy * cz
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0)
    tid = np.repeat(np.arange(len(faces)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    ky = iy0[tid] + local // np.maximum(cz[tid], 1)
    kz = iz0[tid] + local % np.maximum(cz[tid], 1)
    py, pz = ys[ky], zs[kz]
    Y, Z = y[tid], z[tid]
    # 2-D barycentrics of (py, pz) in the projected triangle
    e1y, e1z = Y[:, 1] - Y[:, 0], Z[:, 1] - Z[:, 0]
    e2y, e2z = Y[:, 2] - Y[:, 0], Z[:, 2] - Z[:, 0]
    den = e1y * e2z - e1z * e2y
    ok = np.abs(den) > 1e-300
    den = np.where(ok, den, 1.0)
    qy, qz = py - Y[:, 0], pz - Z[:, 0]
    u = (qy * e2z - qz * e2y) / den
    v = (e1y * qz - e1z * qy) / den
    inside = ok & (u >= 0) & (v >= 0) & (u + v <= 1)
    X = tri[tid, :, 0]
    xs = X[:, 0] + u * (X[:, 1] - X[:, 0]) + v * (X[:, 2] - X[:, 0])
    ray = ky * nz + kz
    return ray[inside], xs[inside]


def points_inside(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Parity test for arbitrary points against a closed triangle surface."""
    points = np.asarray(points, float)
    out = np.zeros(len(points), bool)
    if len(faces) == 0 or len(points) == 0:
        return out
    tri = vertices[faces]
    y = tri[:, :, 1]
    z = tri[:, :, 2]
    ymin, ymax, zmin, zmax = y.min(1), y.max(1), z.min(1), z.max(1)
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    den = e1[:, 1] * e2[:, 2] - e1[:, 2] * e2[:, 1]
    good = np.abs(den) > 1e-300
    den = np.where(good, den, 1.0)
    for i, (px, py, pz) in enumerate(points):
        py, pz = py + RAY_JITTER[0], pz + RAY_JITTER[1]
        cand = good & (ymin <= py) & (ymax >= py) & (zmin <= pz) & (zmax >= pz)
        if not cand.any():
            continue
        t0 = tri[cand, 0]
        qy, qz = py - t0[:, 1], pz - t0[:, 2]
        a, b, d = e1[cand], e2[cand], den[cand]
        u = (qy * b[:, 2] - qz * b[:, 1]) / d
        v = (a[:, 1] * qz - a[:, 2] * qy) / d
        hit = (u >= 0) & (v >= 0) & (u + v <= 1)
        xs = t0[hit, 0] + u[hit] * a[hit, 0] + v[hit] * b[hit, 0]
        out[i] = np.count_nonzero(xs > px) % 2 == 1
    return out
