"""LiDAR panoptic segmentation with decoupled thing/stuff queries."""

from .cloud import DEFAULT_TAXONOMY, LabeledPointCloud, LabelTaxonomy, read_cloud, write_cloud
from .config import RunConfig, toy_config
from .synth import SceneRecipe, synthesize_dataset, synthesize_scene

__all__ = [
    "DEFAULT_TAXONOMY",
    "LabeledPointCloud",
    "LabelTaxonomy",
    "RunConfig",
    "SceneRecipe",
    "read_cloud",
    "synthesize_dataset",
    "synthesize_scene",
    "toy_config",
    "write_cloud",
]
