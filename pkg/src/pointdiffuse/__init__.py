"""Point cloud semantic segmentation by conditional label diffusion."""
from .config import Config, ConfigError, load_config
from .data import FormatError, generate_scene, load_cloud, preset, save_cloud
from .geometry import IndexCache, NeighborTable, PointCloud
from .pipeline import PointDiffuse
from .schedule import NoiseSchedule, make_linear_schedule

__all__ = [
    "Config", "ConfigError", "FormatError", "IndexCache", "NeighborTable", "NoiseSchedule", "PointCloud",
    "PointDiffuse", "generate_scene", "load_cloud", "load_config", "make_linear_schedule", "preset",
    "save_cloud",
]
__version__ = "0.1.0"
