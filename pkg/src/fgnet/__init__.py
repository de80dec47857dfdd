"""Point-cloud semantic segmentation with FG-Conv residual blocks, learned
Gumbel-softmax sampling and global attention, on a small numpy autodiff core."""

from .geometry import GeometryError, NeighborList, PointCloud, build_index, knn_query, radius_query
from .network import FGNet, NetworkConfig, reduced_config

__all__ = [
    "FGNet",
    "GeometryError",
    "NeighborList",
    "NetworkConfig",
    "PointCloud",
    "build_index",
    "knn_query",
    "radius_query",
    "reduced_config",
]

__version__ = "0.1.0"
