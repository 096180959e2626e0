"""Training objective: reconstruction, KL, deep supervision and mesh regularizers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .autodiff import (
    DiffValue, add, concat, div, exp, gather_rows, index, mean, mul, reshape, sparse_dense_matmul, sqrt, sub,
    sum_,
)
from .autodiff.core import as_value
from .mesh.hierarchy import PoolHierarchy, downsample_ground_truth
from .mesh.topology import TET_EDGES, MeshTopology

REG_KINDS = ("none", "laplacian", "edge", "normal", "ter", "laplacian+ter")
SAFE_NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_kl: float = 1e-5
    lambda_ds: float = 1.0
    reg_kind: str = "none"
    lambda_reg: float = 0.0
    # second weight, only read by the combined "laplacian+ter" kind (applies to lambda_reg's laplacian part)
    lambda_lap: float = 0.01

    def __post_init__(self):
        if self.reg_kind not in REG_KINDS:
            raise ValueError(f"reg_kind must be one of {REG_KINDS}, got {self.reg_kind!r}")
        for name in ("lambda_kl", "lambda_ds", "lambda_reg", "lambda_lap"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class LossReport:
    total: DiffValue
    reconstruction: float
    kl: float
    ds: dict[int, float]
    regularizer: float
    terms: dict[str, DiffValue] = field(default_factory=dict, repr=False)

    def row(self) -> dict[str, float]:
        out = {"total": float(self.total.data), "recon": self.reconstruction, "kl": self.kl}
        for level in sorted(self.ds):
            out[f"ds{level}"] = self.ds[level]
        out["reg"] = self.regularizer
        return out


def _coords(x) -> DiffValue:
    v = as_value(x)
    if v.shape[-1] != 3:
        raise ValueError(f"expected (..., M, 3) vertex coordinates, got {v.shape}")
    return v


def recon_loss(pred, gt) -> DiffValue:
    pred, gt = _coords(pred), as_value(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    d = sub(pred, gt)
    return mean(mul(d, d))


def kl_loss(mu, log_var) -> DiffValue:
    """Summed over latent dims, averaged over the batch when inputs are (B, L)."""
    mu, lv = as_value(mu), as_value(log_var)
    term = sub(sub(add(lv, 1.0), mul(mu, mu)), exp(lv))
    per = mul(sum_(term, axis=-1), -0.5)
    return mean(per) if per.ndim else per


def ds_loss(aux: dict[int, DiffValue], gt_levels: dict[int, np.ndarray]) -> dict[int, DiffValue]:
    if set(aux) != set(gt_levels):
        raise ValueError(f"aux levels {sorted(aux)} do not match ground-truth levels {sorted(gt_levels)}")
    return {level: recon_loss(aux[level], gt_levels[level]) for level in sorted(aux)}


def ds_targets(hierarchy: PoolHierarchy, gt: np.ndarray) -> dict[int, np.ndarray]:
    """Pooled ground truth at every level (computed once per sample)."""
    return {lvl: downsample_ground_truth(hierarchy, gt, lvl) for lvl in range(1, hierarchy.n_levels + 1)}


class _LaplacianOp:
    """Uniform graph Laplacian x_i - mean_{j in N(i)} x_j as a constant sparse matrix."""

    def __init__(self, n_vertices: int, edges: np.ndarray):
        A = sp.coo_matrix(
            (np.ones(2 * len(edges)), (np.r_[edges[:, 0], edges[:, 1]], np.r_[edges[:, 1], edges[:, 0]])),
            shape=(n_vertices, n_vertices),
        ).tocsr()
        deg = np.asarray(A.sum(axis=1)).ravel()
        inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
        # isolated vertices get an all-zero row
        I = sp.diags((deg > 0).astype(float))
        self.L = sp.csr_matrix(I - sp.diags(inv) @ A)
        self.Lt = sp.csr_matrix(self.L.T)


_LAP_CACHE: dict[tuple, _LaplacianOp] = {}


def _laplacian_op(n: int, edges: np.ndarray) -> _LaplacianOp:
    key = (n, edges.shape[0], hash(edges.tobytes()))
    if key not in _LAP_CACHE:
        _LAP_CACHE[key] = _LaplacianOp(n, edges)
    return _LAP_CACHE[key]


def _surface_edges(topology: MeshTopology) -> np.ndarray:
    f = topology.faces
    if len(f) == 0:
        raise ValueError("this regularizer needs surface faces")
    return np.unique(np.sort(f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1), axis=0)


def laplacian_reg(pred, topology: MeshTopology) -> DiffValue:
    """Mean over vertices of |v_i - mean of surface neighbours|^2.

    Topologies without faces fall back to their plain edge list.
    """
    X = _coords(pred)
    edges = _surface_edges(topology) if len(topology.faces) else topology.edges
    op = _laplacian_op(topology.n_vertices, edges)
    d = sparse_dense_matmul(op.L, X, op.Lt)
    return mean(sum_(mul(d, d), axis=-1))


def _edge_vectors(X: DiffValue, pairs: np.ndarray) -> DiffValue:
    axis = X.ndim - 2
    return sub(gather_rows(X, pairs[:, 1], axis=axis), gather_rows(X, pairs[:, 0], axis=axis))


def edge_reg(pred, topology: MeshTopology) -> DiffValue:
    X = _coords(pred)
    e = _edge_vectors(X, _surface_edges(topology))
    return mean(sum_(mul(e, e), axis=-1))


class NormalRegStats:
    """Running tally of zero-area faces skipped by :func:`normal_reg`."""

    skipped = 0


_INCIDENCE_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _incidences(topology: MeshTopology):
    """(face f, corner i of the shared edge, opposite vertex l across that edge)
    for every face and each of its three edges."""
    key = (topology.faces.shape[0], hash(topology.faces.tobytes()))
    if key not in _INCIDENCE_CACHE:
        faces = topology.faces
        opp = {}
        for fi, (a, b, c) in enumerate(faces.tolist()):
            opp[(a, b)] = c
            opp[(b, c)] = a
            opp[(c, a)] = b
        f_idx, i_idx, l_idx = [], [], []
        for fi, (a, b, c) in enumerate(faces.tolist()):
            for i, j in ((a, b), (b, c), (c, a)):
                l = opp.get((j, i))
                if l is not None:
                    f_idx.append(fi)
                    i_idx.append(i)
                    l_idx.append(l)
        _INCIDENCE_CACHE[key] = tuple(np.array(v, np.int64) for v in (f_idx, i_idx, l_idx))
    return _INCIDENCE_CACHE[key]


def normal_reg(pred, topology: MeshTopology) -> DiffValue:
    """Mean squared cosine between a face normal and the edge running from the
    face to the opposite vertex of each neighbouring face.

    Flat neighbourhoods give exactly 0. Zero-area faces are skipped and tallied
    in :class:`NormalRegStats`.
    """
    X = _coords(pred)
    faces = topology.faces
    if len(faces) == 0:
        raise ValueError("normal_reg needs surface faces")
    f_idx, i_idx, l_idx = _incidences(topology)
    axis = X.ndim - 2
    p = X.data[..., faces, :]
    area2 = np.linalg.norm(np.cross(p[..., 1, :] - p[..., 0, :], p[..., 2, :] - p[..., 0, :]), axis=-1)
    good = area2 > 1e-14
    NormalRegStats.skipped += int((~good).sum())
    valid = good[..., f_idx].astype(np.float64)
    if not valid.any():
        return mul(sum_(X), 0.0)
    P0 = gather_rows(X, faces[:, 0], axis=axis)
    n = _cross(sub(gather_rows(X, faces[:, 1], axis=axis), P0), sub(gather_rows(X, faces[:, 2], axis=axis), P0))
    n = gather_rows(n, f_idx, axis=axis)
    e = sub(gather_rows(X, l_idx, axis=axis), gather_rows(X, i_idx, axis=axis))
    dot = sum_(mul(n, e), axis=-1)
    # degenerate faces get a unit denominator and zero weight
    nn = add(sum_(mul(n, n), axis=-1), 1.0 - valid)
    ee = add(sum_(mul(e, e), axis=-1), SAFE_NORM_EPS ** 2)
    cos2 = div(mul(dot, dot), mul(nn, ee))
    return div(sum_(mul(cos2, valid)), float(valid.sum()))


def _cross(a: DiffValue, b: DiffValue) -> DiffValue:
    def comp(v, i):
        return index(v, (Ellipsis, slice(i, i + 1)))

    ax, ay, az = (comp(a, i) for i in range(3))
    bx, by, bz = (comp(b, i) for i in range(3))
    return concat([sub(mul(ay, bz), mul(az, by)), sub(mul(az, bx), mul(ax, bz)), sub(mul(ax, by), mul(ay, bx))], axis=-1)


def ter_loss(pred, tetras: np.ndarray) -> DiffValue:
    """Mean over tetrahedra of the variance of their six edge lengths."""
    X = _coords(pred)
    tetras = np.asarray(tetras, np.int64)
    if len(tetras) == 0:
        raise ValueError("ter_loss needs at least one tetrahedron")
    axis = X.ndim - 2
    a = tetras[:, TET_EDGES[:, 0]].ravel()
    b = tetras[:, TET_EDGES[:, 1]].ravel()
    e = sub(gather_rows(X, b, axis=axis), gather_rows(X, a, axis=axis))
    length = sqrt(add(sum_(mul(e, e), axis=-1), SAFE_NORM_EPS ** 2))
    L = reshape(length, X.shape[:-2] + (len(tetras), 6))
    dev = sub(L, mean(L, axis=-1, keepdims=True))
    return mean(mul(dev, dev))


def regularizer(kind: str, pred, topology: MeshTopology, weights: LossWeights | None = None) -> DiffValue:
    if kind == "laplacian":
        return laplacian_reg(pred, topology)
    if kind == "edge":
        return edge_reg(pred, topology)
    if kind == "normal":
        return normal_reg(pred, topology)
    if kind in ("ter", "laplacian+ter"):
        if not topology.is_volumetric:
            raise ValueError(f"regularizer {kind!r} needs a tetrahedral topology")
        t = ter_loss(pred, topology.tetras)
        if kind == "ter":
            return t
        lam = (weights or LossWeights()).lambda_lap
        return add(t, mul(laplacian_reg(pred, topology), lam))
    raise ValueError(f"unknown regularizer {kind!r}")


def total_loss(outputs, dist, gt, weights: LossWeights, topology: MeshTopology,
               gt_levels: dict[int, np.ndarray] | None = None, hierarchy: PoolHierarchy | None = None) -> LossReport:
    """Assemble the full objective from decoder outputs and the latent distribution.

    ``gt_levels`` (pooled ground truth per level) may be precomputed; otherwise
    it is derived from ``hierarchy``.
    """
    if weights.reg_kind in ("ter", "laplacian+ter") and not topology.is_volumetric:
        raise ValueError(f"regularizer {weights.reg_kind!r} needs tetrahedra in the topology")
    if weights.reg_kind in ("laplacian", "edge", "normal") and len(topology.faces) == 0:
        raise ValueError(f"regularizer {weights.reg_kind!r} needs surface faces")
    rec = recon_loss(outputs.final, gt)
    kl = kl_loss(dist.mu, dist.log_var)
    terms = {"recon": rec, "kl": kl}
    total = add(rec, mul(kl, weights.lambda_kl))
    ds_vals = {}
    if outputs.aux:
        if gt_levels is None:
            if hierarchy is None:
                raise ValueError("total_loss needs gt_levels or a hierarchy for deep supervision")
            gt_levels = ds_targets(hierarchy, np.asarray(as_value(gt).data))
        ds = ds_loss(outputs.aux, gt_levels)
        for level, v in ds.items():
            terms[f"ds{level}"] = v
            ds_vals[level] = float(v.data)
        if weights.lambda_ds:
            total = add(total, mul(_sum_all(list(ds.values())), weights.lambda_ds))
    reg_val = 0.0
    if weights.reg_kind != "none":
        reg = regularizer(weights.reg_kind, outputs.final, topology, weights)
        terms["reg"] = reg
        reg_val = float(reg.data)
        if weights.lambda_reg:
            total = add(total, mul(reg, weights.lambda_reg))
    return LossReport(total, float(rec.data), float(kl.data), ds_vals, reg_val, terms)


def _sum_all(vals):
    out = vals[0]
    for v in vals[1:]:
        out = add(out, v)
    return out


__all__ = [
    "LossWeights", "LossReport", "recon_loss", "kl_loss", "ds_loss", "ds_targets", "laplacian_reg",
    "edge_reg", "normal_reg", "ter_loss", "regularizer", "total_loss", "NormalRegStats", "REG_KINDS",
]
