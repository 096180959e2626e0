"""Millimetre <-> relative positional space.

A point ``p`` (mm) maps to voxel coordinates ``v = D^T (p - origin) / spacing``
of the stored image, is shifted by the padding (full mode) or by the crop
window origin (cropped mode), and is then divided by the network input size.
Voxel ``i`` covers ``[i - 0.5, i + 0.5)``, so the cube ``[0, 1]^3`` is exactly
the input grid and its centre is the centre of the image.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..mesh.topology import VertexField

SPACE_MODES = ("full", "cropped")


@dataclass(frozen=True, eq=False)
class SpaceTransform:
    mode: str
    pad: np.ndarray  # voxels added before the stored image (full mode)
    crop_origin: np.ndarray  # first voxel of the crop window (cropped mode)
    size: np.ndarray  # network input shape
    spacing: np.ndarray
    origin: np.ndarray  # stored image origin (mm, centre of voxel 0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if self.mode not in SPACE_MODES:
            raise ValueError(f"mode must be one of {SPACE_MODES}, got {self.mode!r}")
        for name in ("pad", "crop_origin", "size", "spacing", "origin"):
            arr = np.asarray(getattr(self, name), float).reshape(3)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "direction", np.asarray(self.direction, float).reshape(3, 3))
        if np.any(self.spacing <= 0):
            raise ValueError(f"spacing must be positive, got {self.spacing.tolist()}")
        if np.any(self.size <= 0):
            raise ValueError(f"size must be positive, got {self.size.tolist()}")

    @classmethod
    def identity(cls, shape, spacing, origin, direction=None) -> "SpaceTransform":
        return cls("full", np.zeros(3), np.zeros(3), shape, spacing, origin,
                   np.eye(3) if direction is None else direction)

    @property
    def offset(self) -> np.ndarray:
        return self.pad - self.crop_origin + 0.5

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "pad": self.pad.tolist(), "crop_origin": self.crop_origin.tolist(),
            "size": self.size.tolist(), "spacing": self.spacing.tolist(), "origin": self.origin.tolist(),
            "direction": self.direction.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpaceTransform":
        return cls(d["mode"], d["pad"], d["crop_origin"], d["size"], d["spacing"], d["origin"],
                   d.get("direction", np.eye(3)))


def _coords(x) -> np.ndarray:
    return x.coords if isinstance(x, VertexField) else np.asarray(x, float)


def to_relative(gt, transform: SpaceTransform) -> VertexField:
    p = _coords(gt)
    v = (p - transform.origin) @ transform.direction / transform.spacing
    return VertexField((v + transform.offset) / transform.size, "relative")


def to_relative_array(points, transform: SpaceTransform) -> np.ndarray:
    """Same map as :func:`to_relative` for arbitrary (..., 3) arrays, without validation."""
    p = np.asarray(points, float)
    return ((p - transform.origin) @ transform.direction / transform.spacing + transform.offset) / transform.size


def to_mm(pred, transform: SpaceTransform) -> VertexField:
    r = pred.coords if isinstance(pred, VertexField) else np.asarray(pred, float)
    if isinstance(pred, VertexField) and pred.space != "relative":
        raise ValueError("to_mm expects relative coordinates")
    v = r * transform.size - transform.offset
    return VertexField((v * transform.spacing) @ transform.direction.T + transform.origin, "mm")
