"""Vertex and mask-overlap metrics."""
from __future__ import annotations

import warnings

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from ..mesh.topology import STRUCTURES
from .rasterize import VoxelMask


def vertex_errors(pred, gt, labels=None, structures=None) -> tuple[float, float]:
    """(MAE, MSE) of per-vertex Euclidean error, optionally restricted by label."""
    pred = np.asarray(pred, float)
    gt = np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    sel = np.ones(len(gt), bool)
    if structures is not None:
        if labels is None:
            raise ValueError("a structure filter needs per-vertex labels")
        names = [structures] if isinstance(structures, str) else list(structures)
        sel = np.isin(np.asarray(labels), [STRUCTURES.index(s) for s in names])
    if not sel.any():
        raise ValueError(f"structure filter {structures!r} selects no vertices")
    d = np.linalg.norm(pred[sel] - gt[sel], axis=1)
    return float(d.mean()), float((d * d).mean())


def _check_pair(a: VoxelMask, b: VoxelMask):
    if a.mask.shape != b.mask.shape or not np.allclose(a.spacing, b.spacing) or not np.allclose(a.origin, b.origin):
        raise ValueError("masks live on different grids")


def dice(a: VoxelMask, b: VoxelMask) -> float:
    _check_pair(a, b)
    sa, sb = int(a.mask.sum()), int(b.mask.sum())
    if sa + sb == 0:
        warnings.warn("dice of two empty masks is defined as 1", RuntimeWarning, stacklevel=2)
        return 1.0
    return 2.0 * int(np.logical_and(a.mask, b.mask).sum()) / (sa + sb)


_SIX = ndimage.generate_binary_structure(3, 1)
_FOUR = ndimage.generate_binary_structure(2, 1)


def boundary_points(m: VoxelMask) -> np.ndarray:
    """Centres (mm) of mask voxels with a 6-connected background neighbour."""
    inner = ndimage.binary_erosion(m.mask, structure=_SIX, border_value=0)
    idx = np.argwhere(m.mask & ~inner)
    return np.asarray(m.origin) + idx * np.asarray(m.spacing)


def _empty_pair(a, b, what):
    ea, eb = not a.mask.any(), not b.mask.any()
    if ea and eb:
        warnings.warn(f"{what} of two empty masks is defined as 0", RuntimeWarning, stacklevel=3)
        return 0.0
    if ea or eb:
        warnings.warn(f"{what} with one empty mask is infinite", RuntimeWarning, stacklevel=3)
        return float("inf")
    return None


def hausdorff(a: VoxelMask, b: VoxelMask) -> float:
    _check_pair(a, b)
    special = _empty_pair(a, b, "hausdorff")
    if special is not None:
        return special
    pa, pb = boundary_points(a), boundary_points(b)
    dab = cKDTree(pb).query(pa)[0].max()
    dba = cKDTree(pa).query(pb)[0].max()
    return float(max(dab, dba))


def mcd(a: VoxelMask, b: VoxelMask) -> float:
    """Mean over z-slices of the symmetric mean contour distance (mm)."""
    _check_pair(a, b)
    special = _empty_pair(a, b, "mcd")
    if special is not None:
        return special
    sx, sy = a.spacing[0], a.spacing[1]
    vals = []
    for z in range(a.mask.shape[2]):
        sa, sb = a.mask[:, :, z], b.mask[:, :, z]
        if not sa.any() or not sb.any():
            continue
        ca = np.argwhere(sa & ~ndimage.binary_erosion(sa, structure=_FOUR, border_value=0)) * (sx, sy)
        cb = np.argwhere(sb & ~ndimage.binary_erosion(sb, structure=_FOUR, border_value=0)) * (sx, sy)
        dab = cKDTree(cb).query(ca)[0].mean()
        dba = cKDTree(ca).query(cb)[0].mean()
        vals.append(0.5 * (dab + dba))
    if not vals:
        warnings.warn("no z-slice contains both structures; mcd undefined", RuntimeWarning, stacklevel=2)
        return float("nan")
    return float(np.mean(vals))
