"""Surface meshes, weighted graphs, synthetic data and file I/O."""
from .core import (
    DEFAULT_EPSILON, SurfaceMesh, WeightedGraph, build_weighted_graph, check_connected,
    knn_edges, subsample_mesh,
)
from .dataset import (
    DatasetManifest, ManifestEntry, assign_splits, gen_labeled_dataset, read_manifest,
    save_dataset, split_counts, write_manifest,
)
from .io import load_mesh, save_mesh, sidecar_path
from .synthetic import gen_synthetic_mesh, icosphere, watertight

__all__ = [
    "DEFAULT_EPSILON", "SurfaceMesh", "WeightedGraph", "build_weighted_graph",
    "check_connected", "knn_edges", "subsample_mesh", "DatasetManifest", "ManifestEntry",
    "assign_splits", "gen_labeled_dataset", "read_manifest", "save_dataset",
    "split_counts", "write_manifest", "load_mesh", "save_mesh", "sidecar_path",
    "gen_synthetic_mesh", "icosphere", "watertight",
]
