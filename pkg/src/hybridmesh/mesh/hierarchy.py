"""Quadric-error decimation and the fixed pooling/unpooling hierarchy.

Pooling keeps a subset of vertices (binary selection rows); unpooling
re-expresses every removed vertex in barycentric coordinates of the closest
coarse triangle. Volumetric templates decimate their boundary surface and
keep interior vertices by farthest-point selection; removed interior
vertices are interpolated from an enclosing coarse tetrahedron.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay

from .geometry import closest_point_barycentric, points_inside, signed_volumes
from .topology import MeshTopology, VertexField


class HierarchyError(RuntimeError):
    pass


def _face_quadrics(coords: np.ndarray, faces: np.ndarray) -> np.ndarray:
    Q = np.zeros((len(coords), 4, 4))
    p = coords[faces]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    norm = np.linalg.norm(n, axis=1)
    ok = norm > 0
    n = n[ok] / norm[ok, None]
    plane = np.concatenate([n, -np.einsum("ij,ij->i", n, p[ok, 0])[:, None]], axis=1)
    K = plane[:, :, None] * plane[:, None, :]
    for k in range(3):
        np.add.at(Q, faces[ok, k], K)
    return Q


def decimate(coords: np.ndarray, faces: np.ndarray, target: int, vertex_subset=None):
    """Collapse edges of a closed triangle surface until ``target`` vertices remain.

    Vertex positions are never moved: each collapse merges one endpoint into
    the other, choosing the endpoint with the lower quadric error. Ties in the
    priority queue break on the smallest (i, j) vertex pair.

    Returns (sorted kept vertex ids, surviving faces in original ids,
    original face index of each surviving face).
    """
    faces = np.asarray(faces, np.int64)
    verts = np.unique(faces) if vertex_subset is None else np.asarray(vertex_subset)
    Q = _face_quadrics(coords, faces)
    hom = np.concatenate([coords, np.ones((len(coords), 1))], axis=1)

    face_list = {f: list(map(int, faces[f])) for f in range(len(faces))}
    vfaces: dict[int, set[int]] = {int(v): set() for v in verts}
    nbrs: dict[int, set[int]] = {int(v): set() for v in verts}
    for f, (a, b, c) in face_list.items():
        for v in (a, b, c):
            vfaces[v].add(f)
        nbrs[a] |= {b, c}
        nbrs[b] |= {a, c}
        nbrs[c] |= {a, b}
    stamp = {v: 0 for v in nbrs}
    alive = set(nbrs)

    def cost(i, j):
        Qs = Q[i] + Q[j]
        ci = float(hom[i] @ Qs @ hom[i])
        cj = float(hom[j] @ Qs @ hom[j])
        # keep = endpoint whose position has the lower error
        return (ci, i, j) if ci <= cj else (cj, j, i)

    heap: list = []

    def push(u, v):
        a, b = (u, v) if u < v else (v, u)
        c, keep, _ = cost(a, b)
        heapq.heappush(heap, (c, a, b, keep, stamp[a], stamp[b]))

    for v in sorted(nbrs):
        for u in nbrs[v]:
            if v < u:
                push(v, u)

    def face_normal(tri):
        p = coords[tri]
        return np.cross(p[1] - p[0], p[2] - p[0])

    def can_collapse(k, r):
        shared = nbrs[k] & nbrs[r]
        opp = set()
        for f in vfaces[r]:
            if k in face_list[f]:
                opp |= set(face_list[f]) - {k, r}
        if shared != opp or len(opp) != 2:
            return False
        if any(len(nbrs[o]) <= 3 for o in opp):
            return False
        if len(nbrs[k] | nbrs[r]) - 2 < 3:
            return False
        for f in vfaces[r]:
            tri = face_list[f]
            if k in tri:
                continue
            new = [k if v == r else v for v in tri]
            if float(face_normal(tri) @ face_normal(new)) <= 0.0:
                return False
        return True

    while len(alive) > target and heap:
        c, a, b, keep, sa, sb = heapq.heappop(heap)
        if a not in alive or b not in alive or stamp[a] != sa or stamp[b] != sb or b not in nbrs[a]:
            continue
        k, r = keep, (b if keep == a else a)
        if not can_collapse(k, r):
            continue
        for f in list(vfaces[r]):
            tri = face_list[f]
            if k in tri:
                for v in tri:
                    vfaces[v].discard(f)
                del face_list[f]
            else:
                face_list[f] = [k if v == r else v for v in tri]
                vfaces[k].add(f)
        vfaces[r] = set()
        for n in nbrs[r]:
            nbrs[n].discard(r)
            if n != k:
                nbrs[n].add(k)
                nbrs[k].add(n)
        nbrs[k].discard(r)
        nbrs[r] = set()
        Q[k] += Q[r]
        alive.discard(r)
        ring = {k} | nbrs[k]
        for v in ring:
            stamp[v] += 1
        for v in ring:
            for u in nbrs[v]:
                if v < u or u not in ring:
                    push(v, u)

    if len(alive) > target:
        raise HierarchyError(
            f"decimation stalled at {len(alive)} vertices (target {target}); mesh is not a closed manifold "
            "or too small to reduce further"
        )
    fids = np.array(sorted(face_list), dtype=np.int64)
    new_faces = np.array([face_list[f] for f in fids], dtype=np.int64).reshape(-1, 3)
    return np.array(sorted(alive), dtype=np.int64), new_faces, fids


@dataclass(frozen=True, eq=False)
class PoolHierarchy:
    """``pools[i]`` maps level i to level i+1 (M_{i+1} x M_i); ``unpools[i]`` the reverse.

    ``topologies[0]`` and ``coords[0]`` are the full-resolution template.
    """

    pools: list
    unpools: list
    topologies: list
    coords: list

    @property
    def n_levels(self) -> int:
        return len(self.pools)

    @property
    def counts(self) -> list[int]:
        return [t.n_vertices for t in self.topologies]

    def pool(self, level: int) -> sp.csr_matrix:
        """Pooling matrix P_level taking level-1 to ``level`` (1-based)."""
        self._check(level)
        return self.pools[level - 1]

    def unpool(self, level: int) -> sp.csr_matrix:
        """Unpooling matrix U_level taking ``level`` back to level-1 (1-based)."""
        self._check(level)
        return self.unpools[level - 1]

    def _check(self, level):
        if not 1 <= level <= self.n_levels:
            raise ValueError(f"level must be in [1, {self.n_levels}], got {level}")


def _tet_barycentric(p: np.ndarray, tet_pts: np.ndarray):
    """Barycentric coordinates of ``p`` in each tetrahedron (T, 4)."""
    v0 = tet_pts[:, 0]
    Mt = np.stack([tet_pts[:, 1] - v0, tet_pts[:, 2] - v0, tet_pts[:, 3] - v0], axis=2)
    lam = np.linalg.solve(Mt, (p - v0)[:, :, None])[:, :, 0]
    return np.concatenate([1 - lam.sum(1, keepdims=True), lam], axis=1)


def _coarse_tetras(coords, kept, comp, faces_c, comp_of_face):
    """Delaunay tetrahedra per component, kept if the centroid lies inside that
    component's coarse closed surfaces."""
    out = []
    for cid in np.unique(comp[kept]):
        vids = kept[comp[kept] == cid]
        if len(vids) < 4:
            continue
        pts = coords[vids]
        try:
            tri = Delaunay(pts, qhull_options="Qbb Qc Qz Q12")
        except Exception:  # noqa: BLE001 - coplanar vertex sets have no tetrahedra
            continue
        tets = vids[tri.simplices]
        vol = signed_volumes(coords, tets)
        scale = np.ptp(pts, axis=0).max() ** 3
        tets, vol = tets[np.abs(vol) > 1e-9 * scale], vol[np.abs(vol) > 1e-9 * scale]
        surf = faces_c[comp_of_face == cid]
        if len(surf):
            cen = coords[tets].mean(axis=1)
            keep = points_inside(cen, coords, surf)
            tets, vol = tets[keep], vol[keep]
        flip = vol < 0
        tets[flip] = tets[flip][:, [0, 2, 1, 3]]
        out.append(tets)
    return np.concatenate(out) if out else np.zeros((0, 4), np.int64)


def _level(topo: MeshTopology, coords: np.ndarray):
    M = topo.n_vertices
    target = math.ceil(M / 2)
    surf = topo.surface_vertices
    interior = np.setdiff1d(np.arange(M), surf)
    surf_target = math.ceil(len(surf) / 2) if len(interior) else target
    kept_s, faces_c, fids = decimate(coords, topo.faces, surf_target, vertex_subset=surf)

    n_int = target - len(kept_s)
    chosen: list[int] = []
    if n_int > 0:
        d = np.full(len(interior), np.inf)
        ref = coords[kept_s]
        for start in range(0, len(ref), 256):
            block = np.linalg.norm(coords[interior][:, None] - ref[None, start:start + 256], axis=2)
            d = np.minimum(d, block.min(axis=1))
        for _ in range(n_int):
            j = int(np.argmax(d))  # ties -> lowest index
            chosen.append(int(interior[j]))
            d = np.minimum(d, np.linalg.norm(coords[interior] - coords[interior[j]], axis=1))
            d[j] = -np.inf
    kept = np.sort(np.concatenate([kept_s, np.array(chosen, np.int64)]))
    new_id = -np.ones(M, np.int64)
    new_id[kept] = np.arange(len(kept))

    comp = topo.components
    comp_of_face = comp[faces_c[:, 0]] if len(faces_c) else np.zeros(0, np.int64)
    tets_c = np.zeros((0, 4), np.int64)
    if topo.is_volumetric:
        tets_c = _coarse_tetras(coords, kept, comp, faces_c, comp_of_face)

    rows, cols, vals = [], [], []
    is_surf = np.zeros(M, bool)
    is_surf[surf] = True
    tet_pts = coords[tets_c] if len(tets_c) else None
    for v in range(M):
        if new_id[v] >= 0:
            rows.append(v), cols.append(new_id[v]), vals.append(1.0)
            continue
        if not is_surf[v] and len(tets_c):
            sel = np.flatnonzero(comp[tets_c[:, 0]] == comp[v])
            if len(sel):
                lam = _tet_barycentric(coords[v], tet_pts[sel])
                best = int(np.argmax(lam.min(axis=1)))
                w = np.clip(lam[best], 0.0, None)
                w /= w.sum()
                ids = tets_c[sel[best]]
                for i, wi in zip(ids, w):
                    if wi > 0:
                        rows.append(v), cols.append(new_id[i]), vals.append(wi)
                continue
        sel = np.flatnonzero(comp_of_face == comp[v])
        if len(sel) == 0:
            sel = np.arange(len(faces_c))
        tri = faces_c[sel]
        bary, d2 = closest_point_barycentric(coords[v], coords[tri[:, 0]], coords[tri[:, 1]], coords[tri[:, 2]])
        best = int(np.argmin(d2))
        w = bary[best] / bary[best].sum()
        for i, wi in zip(tri[best], w):
            if wi > 0:
                rows.append(v), cols.append(new_id[i]), vals.append(wi)

    U = sp.csr_matrix((vals, (rows, cols)), shape=(M, len(kept)))
    # exact unit row sums
    rs = np.asarray(U.sum(axis=1)).ravel()
    U = sp.csr_matrix(sp.diags(1.0 / rs) @ U)
    P = sp.csr_matrix((np.ones(len(kept)), (np.arange(len(kept)), kept)), shape=(len(kept), M))

    surfaces = {}
    old_to_new_face = {int(f): i for i, f in enumerate(fids)}
    for name, idx in topo.surfaces.items():
        surfaces[name] = np.array([old_to_new_face[int(f)] for f in idx if int(f) in old_to_new_face], np.int64)
    coarse = MeshTopology.build(
        len(kept), faces=new_id[faces_c], tetras=new_id[tets_c] if len(tets_c) else None,
        labels=topo.labels[kept], surfaces=surfaces,
    )
    return P, U, coarse, coords[kept]


def build_hierarchy(topology: MeshTopology, coords, levels: int = 4) -> PoolHierarchy:
    """Build ``levels`` pooling/unpooling pairs on the template mesh (mm coordinates)."""
    X = coords.coords if isinstance(coords, VertexField) else np.asarray(coords, float)
    if X.shape != (topology.n_vertices, 3):
        raise ValueError(f"coords shape {X.shape} does not match {topology.n_vertices} vertices")
    if len(topology.faces) == 0:
        raise HierarchyError("hierarchy construction needs a surface (faces)")
    pools, unpools, topos, cs = [], [], [topology], [X]
    for _ in range(levels):
        P, U, topo, X = _level(topos[-1], cs[-1])
        pools.append(P)
        unpools.append(U)
        topos.append(topo)
        cs.append(X)
    return PoolHierarchy(pools, unpools, topos, cs)


def downsample_ground_truth(hierarchy: PoolHierarchy, gt, level: int) -> np.ndarray:
    """Apply P_level ... P_1 to a full-resolution field (M, C) or batch (B, M, C)."""
    hierarchy._check(level)
    X = gt.coords if isinstance(gt, VertexField) else np.asarray(gt, float)
    if X.shape[-2] != hierarchy.counts[0]:
        raise ValueError(f"ground truth has {X.shape[-2]} rows, expected {hierarchy.counts[0]}")
    for i in range(level):
        P = hierarchy.pools[i]
        X = P @ X if X.ndim == 2 else np.stack([P @ x for x in X])
    return np.asarray(X)
