from .dataset import DatasetError, PhantomDataset, generate_phantom_dataset, make_splits, worker_count
from .phantom import ShapeParams, Template
from .sample import (
    LAX_NAMES, AugmentConfig, AugmentParams, CropError, GridConfig, LaxImage, MultiViewSample, SaxImage,
    apply_augmentation, augment, pad_and_crop,
)
from .templates import load_template, template_hierarchy, write_template_assets
from .transforms import SpaceTransform, to_mm, to_relative

__all__ = [
    "DatasetError", "PhantomDataset", "generate_phantom_dataset", "make_splits", "worker_count", "ShapeParams",
    "Template", "LAX_NAMES", "AugmentConfig", "AugmentParams", "CropError", "GridConfig", "LaxImage",
    "MultiViewSample", "SaxImage", "apply_augmentation", "augment", "pad_and_crop", "load_template",
    "template_hierarchy", "write_template_assets", "SpaceTransform", "to_mm", "to_relative",
]
