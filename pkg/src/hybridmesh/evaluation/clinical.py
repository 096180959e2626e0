"""Ventricular volumes by the method of disks and ejection fractions."""
from __future__ import annotations

import math

import numpy as np

from .rasterize import VoxelMask


def disk_volume_ml(m: VoxelMask) -> float:
    """Sum over z-slices of (pixel count x pixel area) x slice spacing, in mL."""
    pixel_area = m.spacing[0] * m.spacing[1]
    per_slice = m.mask.sum(axis=(0, 1)) * pixel_area
    return float(per_slice.sum() * m.spacing[2] / 1000.0)


def ejection_fraction(edv: float, esv: float) -> float | None:
    if edv <= 0:
        return None
    return (edv - esv) / edv * 100.0


def clinical_indices(ed: dict[str, VoxelMask], es: dict[str, VoxelMask]) -> dict[str, float | None]:
    """LV/RV EDV, ESV (mL) and EF (%) from blood-pool masks keyed ``LV`` / ``RV``."""
    out: dict[str, float | None] = {}
    for key in ("LV", "RV"):
        if key not in ed or key not in es:
            continue
        if ed[key].mask.shape != es[key].mask.shape or not np.allclose(ed[key].spacing, es[key].spacing):
            raise ValueError(f"{key} ED and ES masks live on different grids")
        edv, esv = disk_volume_ml(ed[key]), disk_volume_ml(es[key])
        ef = ejection_fraction(edv, esv)
        out[f"{key}EDV"] = edv
        out[f"{key}ESV"] = esv
        out[f"{key}EF"] = None if ef is None or math.isnan(ef) else ef
    return out
