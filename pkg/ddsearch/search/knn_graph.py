"""
k-NN graph with greedy best-improving search

Each node stores its own k nearest points (directed, sorted by distance, no
self-loops). A query walks from a start node to the best improving neighbor
until no neighbor is closer or f_s node changes were made.
"""

import logging
import time
import zlib
from typing import Any, Dict, Optional, Tuple

import numpy as np

from ..errors import ContractViolationError
from ..models import BackendKind, MaterialDataset, QueryParams, QueryResult
from .base import DistanceProbe, NnIndex, as_query

logger = logging.getLogger(__name__)

DEFAULT_GRAPH_K = 10


class KnnGraph(NnIndex):
    """Adjacency (N, k) plus the parameters the graph was built with"""

    kind = BackendKind.GRAPH

    def __init__(self, data: MaterialDataset, adjacency: np.ndarray, builder_kind: str, builder_fd: float, seed: int = 0):
        super().__init__(data)
        self.adjacency = adjacency
        self.builder_kind = builder_kind
        self.builder_fd = builder_fd
        self.seed = seed

    @property
    def k(self) -> int:
        return self.adjacency.shape[1]

    def query(self, q, params: QueryParams = QueryParams()) -> QueryResult:
        return graph_query(self, q, params)

    def knn(self, q, count: int, f_d: float = 1.0) -> Tuple[np.ndarray, np.ndarray, int]:
        count = min(count, self.n_points)
        probe = DistanceProbe(self.points, as_query(q), keep=count, prune_rank=count)
        _walk(self, probe, self.start_nodes(None, 0, probe.query)[0], None)
        return probe.ids.copy(), probe.dists.copy(), probe.comparisons

    def start_nodes(self, warm_start: Optional[int], restarts: int, q) -> np.ndarray:
        """Warm start (if any) followed by random starts seeded by the graph seed and the query"""
        key = zlib.crc32(np.ascontiguousarray(q, dtype=np.float64).tobytes())
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, key])))
        extra = restarts if warm_start is not None else restarts + 1
        random_starts = rng.integers(self.n_points, size=extra)
        if warm_start is None:
            return random_starts
        if not 0 <= warm_start < self.n_points:
            raise ContractViolationError(f"warm start id {warm_start} outside [0, {self.n_points})")
        return np.concatenate([[warm_start], random_starts]).astype(np.int64)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"adjacency": self.adjacency}

    def params(self) -> Dict[str, Any]:
        return {"k": self.k, "builder": self.builder_kind, "builder_fd": self.builder_fd, "seed": self.seed}


def build_knn_graph(
    data: MaterialDataset,
    k: int,
    builder: NnIndex,
    builder_fd: float = 1.0,
    seed: int = 0,
) -> KnnGraph:
    """Query the builder for every point's k + 1 nearest and drop the point itself"""
    n = data.n_points
    if not 1 <= k < n:
        raise ContractViolationError(f"graph k must satisfy 1 <= k < N={n}, got {k}")
    if not builder.data.same_points(data) or not builder.metric.same_as(data.metric):
        raise ContractViolationError("graph builder must index the same bound data set")
    started = time.perf_counter()
    ids, _, comparisons = builder.knn_batch(data.mapped, k + 1, builder_fd)
    is_self = ids == np.arange(n)[:, None]
    # rows where the builder missed the point itself lose their farthest entry instead
    is_self[~is_self.any(axis=1), -1] = True
    first_self = is_self & (np.cumsum(is_self, axis=1) == 1)
    adjacency = ids[~first_self].reshape(n, k)
    graph = KnnGraph(data, adjacency, builder.kind.value, builder_fd, seed)
    graph.build_time_s = builder.build_time_s + time.perf_counter() - started
    logger.info("built %d-NN graph over %d points with %s (f_d=%.2f, %d comparisons) in %.3f s",
                k, n, builder.kind.value, builder_fd, comparisons, graph.build_time_s)
    return graph


def _walk(g: KnnGraph, probe: DistanceProbe, start: int, f_s: Optional[int]) -> int:
    """Greedy descent from `start`; returns the number of node changes"""
    current = int(start)
    current_d = float(probe.evaluate([current], counted=False)[0])
    hops = 0
    while f_s is None or hops < f_s:
        neighbors = g.adjacency[current]
        dists = probe.evaluate(neighbors)
        j = int(np.lexsort((neighbors, dists))[0])
        if dists[j] >= current_d:
            break
        current, current_d = int(neighbors[j]), float(dists[j])
        hops += 1
    return hops


def graph_query(g: KnnGraph, q, params: QueryParams = QueryParams()) -> QueryResult:
    """Best of the greedy walks from the warm start and `restarts` random starts"""
    probe = DistanceProbe(g.points, as_query(q), keep=2)
    hops = 0
    for start in g.start_nodes(params.warm_start, params.restarts, probe.query):
        hops += _walk(g, probe, start, params.f_s)
    return probe.result(hops=hops, second_exact=False)
