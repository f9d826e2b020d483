"""
Nearest-neighbor indices over mapped phase-space coordinates
"""

from typing import Union

from ..errors import ContractViolationError
from ..models import BackendKind, MaterialDataset
from .base import DistanceProbe, LinearIndex, NnIndex, linear_query, reuse_previous, should_skip
from .kdtree import DEFAULT_LEAF_SIZE, KdTreeIndex, build_kdtree, kd_query
from .kmeans_tree import DEFAULT_BRANCHING, KMeansTreeIndex, build_kmeans_tree, km_query
from .knn_graph import DEFAULT_GRAPH_K, KnnGraph, build_knn_graph, graph_query
from .storage import load_index, save_index


def build_index(
    data: MaterialDataset,
    kind: Union[BackendKind, str] = BackendKind.LINEAR,
    *,
    leaf_size: int = DEFAULT_LEAF_SIZE,
    branching: int = DEFAULT_BRANCHING,
    graph_k: int = DEFAULT_GRAPH_K,
    builder: Union[BackendKind, str] = BackendKind.KMEANS,
    builder_fd: float = 0.6,
    seed: int = 0,
) -> NnIndex:
    """Build the index of the given kind; graphs are built with a `builder` index"""
    kind = BackendKind(kind)
    if kind is BackendKind.LINEAR:
        return LinearIndex(data)
    if kind is BackendKind.KDTREE:
        return build_kdtree(data, leaf_size)
    if kind is BackendKind.KMEANS:
        return build_kmeans_tree(data, branching, seed)
    builder = BackendKind(builder)
    if builder is BackendKind.GRAPH:
        raise ContractViolationError("a k-NN graph cannot be built with another graph")
    base = build_index(data, builder, leaf_size=leaf_size, branching=branching, seed=seed)
    return build_knn_graph(data, graph_k, base, builder_fd, seed)


__all__ = [
    "DistanceProbe", "NnIndex", "LinearIndex", "KdTreeIndex", "KMeansTreeIndex", "KnnGraph",
    "linear_query", "should_skip", "reuse_previous", "kd_query", "km_query", "graph_query",
    "build_kdtree", "build_kmeans_tree", "build_knn_graph", "build_index", "save_index", "load_index",
]
