from .clinical import clinical_indices, disk_volume_ml, ejection_fraction
from .metrics import boundary_points, dice, hausdorff, mcd, vertex_errors
from .quality import METRICS, PERCENTILES, QualityReport, histogram, summarize, tetra_quality
from .report import evaluate_predictions, quality_rows, write_evaluation, write_quality_csv
from .rasterize import GridSpec, OpenSurfaceError, VoxelMask, rasterize, structure_masks

__all__ = [
    "clinical_indices", "disk_volume_ml", "ejection_fraction", "boundary_points", "dice", "hausdorff", "mcd",
    "vertex_errors", "METRICS", "PERCENTILES", "QualityReport", "histogram", "summarize", "tetra_quality",
    "GridSpec", "OpenSurfaceError", "VoxelMask", "rasterize", "structure_masks",
    "evaluate_predictions", "quality_rows", "write_evaluation", "write_quality_csv",
]
