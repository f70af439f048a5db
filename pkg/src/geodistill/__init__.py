"""Surface-aware features distilled from image features with geodesic supervision."""

__version__ = "0.1.0"

from .mesh import Mesh, MeshError, farthest_point_sampling, load_mesh, save_mesh
from .features import normalize_rows, read_features, write_features
from .geodesics import dijkstra_geodesic, heat_geodesic, rescale_distances
from .trainer import TrainConfig, embed, train
from .matching import evaluate, kmeans, match_points, pca_project
from .pose import AlignConfig, PoseParams, align_pose, align_sequence, lbs_deform, regress_skinning

__all__ = [
    "Mesh", "MeshError", "farthest_point_sampling", "load_mesh", "save_mesh",
    "normalize_rows", "read_features", "write_features",
    "dijkstra_geodesic", "heat_geodesic", "rescale_distances",
    "TrainConfig", "embed", "train",
    "evaluate", "kmeans", "match_points", "pca_project",
    "AlignConfig", "PoseParams", "align_pose", "align_sequence", "lbs_deform", "regress_skinning",
]
