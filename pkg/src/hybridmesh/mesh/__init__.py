from .geometry import icosphere, mesh_volume, points_inside, signed_volumes
from .hierarchy import HierarchyError, PoolHierarchy, build_hierarchy, decimate, downsample_ground_truth
from .io import (
    MeshFormatError, load_hierarchy, read_ply, read_tetgen, save_hierarchy, write_ply, write_tetgen,
)
from .topology import STRUCTURES, MeshTopology, TopologyError, VertexField, boundary_edges
from .tps import SingularLandmarksError, TpsWarp, fit_tps, warp_volumetric_template

__all__ = [
    "icosphere", "mesh_volume", "points_inside", "signed_volumes", "HierarchyError", "PoolHierarchy",
    "build_hierarchy", "decimate", "downsample_ground_truth", "MeshFormatError", "load_hierarchy",
    "read_ply", "read_tetgen", "save_hierarchy", "write_ply", "write_tetgen", "STRUCTURES",
    "MeshTopology", "TopologyError", "VertexField", "boundary_edges", "SingularLandmarksError",
    "TpsWarp", "fit_tps", "warp_volumetric_template",
]
