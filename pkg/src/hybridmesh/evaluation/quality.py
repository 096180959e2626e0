"""Tetrahedral element quality (Verdict-style normalisations).

Every metric is normalised so the regular tetrahedron scores its optimum:
scaled Jacobian 1, aspect ratio 1, mean ratio 1, shape quality 1, skewness 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..mesh.topology import TET_EDGES

METRICS = ("scaled_jacobian", "aspect_ratio", "mean_ratio", "skewness", "shape_quality")
PERCENTILES = (1, 5, 25, 50, 75)
_SQRT2 = np.sqrt(2.0)

# edges meeting at each corner of a tetrahedron (corner, other)
_CORNERS = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])


def summarize(values: np.ndarray) -> dict[str, float]:
    v = np.asarray(values, float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {k: float("nan") for k in ("mean", "std", "min", "max", *(f"p{p}" for p in PERCENTILES))}
    out = {"mean": float(v.mean()), "std": float(v.std()), "min": float(v.min()), "max": float(v.max())}
    for p, q in zip(PERCENTILES, np.percentile(v, PERCENTILES)):
        out[f"p{p}"] = float(q)
    return out


@dataclass
class QualityReport:
    per_element: dict[str, np.ndarray]
    degenerate: int
    summary: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.summary:
            self.summary = {k: summarize(v) for k, v in self.per_element.items()}

    @property
    def n_elements(self) -> int:
        return len(self.per_element["scaled_jacobian"])


def tetra_quality(coords, tetras, rel_tol: float = 1e-12) -> QualityReport:
    X = np.asarray(coords, float)
    T = np.asarray(tetras, np.int64)
    if T.ndim != 2 or T.shape[1] != 4 or len(T) == 0:
        raise ValueError("tetra_quality needs a non-empty (N, 4) element list")
    p = X[T]  # (N, 4, 3)
    e1, e2, e3 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]
    det = np.einsum("ij,ij->i", np.cross(e1, e2), e3)  # 6V, signed
    V = det / 6.0
    edges = p[:, TET_EDGES[:, 1]] - p[:, TET_EDGES[:, 0]]
    l2 = np.einsum("ijk,ijk->ij", edges, edges)
    lens = np.sqrt(l2)
    lmax = lens.max(axis=1)
    degenerate = np.abs(det) <= rel_tol * np.maximum(lmax, 1e-300) ** 3

    with np.errstate(divide="ignore", invalid="ignore"):
        # corner edge-length products; each consistently oriented corner determinant equals det
        corner_len = np.stack([
            np.prod(np.linalg.norm(p[:, _CORNERS[c]] - p[:, c:c + 1], axis=2), axis=1) for c in range(4)
        ], axis=1)
        sj = np.min(_SQRT2 * det[:, None] / corner_len, axis=1)
        mean_ratio = 12.0 * np.sign(V) * np.cbrt(3.0 * np.abs(V)) ** 2 / l2.sum(axis=1)
        l_rms = np.sqrt(l2.sum(axis=1) / 6.0)
        shape = 6.0 * _SQRT2 * V / l_rms ** 3
        face_idx = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
        area = 0.5 * np.linalg.norm(
            np.cross(p[:, face_idx[:, 1]] - p[:, face_idx[:, 0]], p[:, face_idx[:, 2]] - p[:, face_idx[:, 0]]), axis=2
        ).sum(axis=1)
        r_in = 3.0 * np.abs(V) / area
        aspect = lmax / (2.0 * np.sqrt(6.0) * r_in)
        num = (
            np.einsum("ij,ij->i", e1, e1)[:, None] * np.cross(e2, e3)
            + np.einsum("ij,ij->i", e2, e2)[:, None] * np.cross(e3, e1)
            + np.einsum("ij,ij->i", e3, e3)[:, None] * np.cross(e1, e2)
        )
        R = np.linalg.norm(num, axis=1) / (2.0 * np.abs(det))
        v_reg = 8.0 * np.sqrt(3.0) * R ** 3 / 27.0
        skew = np.clip(1.0 - np.abs(V) / v_reg, 0.0, 1.0)

    sj[degenerate] = 0.0
    mean_ratio[degenerate] = 0.0
    shape[degenerate] = 0.0
    aspect[degenerate] = np.inf
    skew[degenerate] = 1.0
    np.clip(sj, -1.0, 1.0, out=sj)
    per = {
        "scaled_jacobian": sj, "aspect_ratio": aspect, "mean_ratio": mean_ratio,
        "skewness": skew, "shape_quality": shape,
    }
    return QualityReport(per, int(degenerate.sum()))


def histogram(values, bins: int = 20, lo: float = -1.0, hi: float = 1.0):
    """Counts and edges on a fixed range; out-of-range values land in the end bins."""
    v = np.clip(np.asarray(values, float), lo, hi)
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return counts, edges
