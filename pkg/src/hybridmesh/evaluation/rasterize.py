"""Voxel masks from closed triangle surfaces by parity ray casting along +x."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..mesh.geometry import ray_crossings
from ..mesh.topology import MeshTopology, boundary_edges


class OpenSurfaceError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"grid spacing must be positive, got {self.spacing}")

    def axis(self, i: int) -> np.ndarray:
        return self.origin[i] + self.spacing[i] * np.arange(self.shape[i])


@dataclass(frozen=True, eq=False)
class VoxelMask:
    mask: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, bool))
        if self.mask.ndim != 3:
            raise ValueError(f"mask must be 3-D, got {self.mask.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"mask spacing must be positive, got {self.spacing}")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.mask.shape, tuple(self.spacing), tuple(self.origin))

    def __and__(self, other: "VoxelMask") -> "VoxelMask":
        return VoxelMask(self.mask & other.mask, self.spacing, self.origin)

    def __sub__(self, other: "VoxelMask") -> "VoxelMask":
        return VoxelMask(self.mask & ~other.mask, self.spacing, self.origin)


def rasterize(coords: np.ndarray, faces: np.ndarray, grid: GridSpec) -> VoxelMask:
    """Mark voxels whose centres lie inside the closed surface ``faces``."""
    coords = np.asarray(coords, float)
    faces = np.asarray(faces, np.int64)
    open_edges = boundary_edges(faces)
    if len(open_edges):
        raise OpenSurfaceError(f"surface is not closed: {len(open_edges)} boundary edges")
    nx, ny, nz = grid.shape
    xs, ys, zs = grid.axis(0), grid.axis(1), grid.axis(2)
    ray, xcross = ray_crossings(coords, faces, ys, zs)
    # toggle parity at the first voxel centre beyond each crossing, then prefix-sum along x
    k = np.ceil((xcross - grid.origin[0]) / grid.spacing[0]).astype(np.int64)
    keep = k < nx
    k = np.clip(k[keep], 0, nx)
    toggles = np.zeros((ny * nz, nx + 1), np.int64)
    np.add.at(toggles, (ray[keep], k), 1)
    inside = (np.cumsum(toggles[:, :nx], axis=1) % 2).astype(bool)
    mask = inside.reshape(ny, nz, nx).transpose(2, 0, 1)
    return VoxelMask(mask, tuple(grid.spacing), tuple(grid.origin))


def structure_masks(coords: np.ndarray, topology: MeshTopology, grid: GridSpec) -> dict[str, VoxelMask]:
    """Masks for every named closed sub-surface plus the LV myocardium
    (epicardium minus endocardium) when both LV surfaces exist."""
    out = {name: rasterize(coords, topology.surface_faces(name), grid) for name in topology.surfaces}
    if "LV_endo" in out and "LV_epi" in out:
        out["LV_myo"] = out["LV_epi"] - out["LV_endo"]
    return out
