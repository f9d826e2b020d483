"""
Hierarchical k-means tree with cluster-radius pruning

Each node stores its cluster mean and radius (largest distance from the mean to
a contained point). Children of a node are stored contiguously:
first_child[node] .. first_child[node] + n_children[node].
"""

import logging
import time
import warnings
from typing import Any, Dict, List, Tuple

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from ..errors import ContractViolationError
from ..models import BackendKind, MaterialDataset, QueryParams, QueryResult
from .base import DistanceProbe, NnIndex, as_query

logger = logging.getLogger(__name__)

DEFAULT_BRANCHING = 4
KMEANS_MAX_ITER = 25
KMEANS_TOL = 1e-6


def cluster_node(points: np.ndarray, k: int, seed: int) -> List[np.ndarray]:
    """
    Positions of `points` grouped into at most k non-empty clusters.

    Fewer groups come back when the points hold fewer than k distinct values;
    a single group means the node cannot be split.
    """
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=KMEANS_MAX_ITER,
                tol=KMEANS_TOL, random_state=seed)
    with warnings.catch_warnings():
        # duplicate points leave fewer distinct clusters than requested
        warnings.simplefilter("ignore", ConvergenceWarning)
        labels = km.fit_predict(points)
    groups = [np.flatnonzero(labels == c) for c in range(k)]
    return [g for g in groups if g.size]

class KMeansTreeIndex(NnIndex):
    """k-means tree over the mapped coordinates"""

    kind = BackendKind.KMEANS

    def __init__(self, data: MaterialDataset, branching: int, seed: int,
                 centers, radius, first_child, n_children, start, stop, perm):
        super().__init__(data)
        self.branching = branching
        self.seed = seed
        self.centers = centers
        self.radius = radius
        self.first_child = first_child
        self.n_children = n_children
        self.start = start
        self.stop = stop
        self.perm = perm

    @property
    def bucket_size(self) -> int:
        return self.branching * self.branching

    @property
    def n_nodes(self) -> int:
        return self.radius.size

    def is_leaf(self, node: int) -> bool:
        return self.n_children[node] == 0

    def children(self, node: int) -> np.ndarray:
        first = self.first_child[node]
        return np.arange(first, first + self.n_children[node])

    def node_ids(self, node: int) -> np.ndarray:
        return self.perm[self.start[node]:self.stop[node]]

    def depth(self) -> int:
        deepest = 0
        stack = [(0, 1)]
        while stack:
            node, level = stack.pop()
            deepest = max(deepest, level)
            stack.extend((int(child), level + 1) for child in self.children(node))
        return deepest

    def query(self, q, params: QueryParams = QueryParams()) -> QueryResult:
        return km_query(self, q, params)

    def knn(self, q, count: int, f_d: float = 1.0) -> Tuple[np.ndarray, np.ndarray, int]:
        count = min(count, self.n_points)
        probe = DistanceProbe(self.points, as_query(q), keep=count, prune_rank=count)
        _search(self, 0, probe, f_d)
        return probe.ids.copy(), probe.dists.copy(), probe.comparisons

    def arrays(self) -> Dict[str, np.ndarray]:
        return {
            "centers": self.centers, "radius": self.radius,
            "first_child": self.first_child, "n_children": self.n_children,
            "start": self.start, "stop": self.stop, "perm": self.perm,
        }

    def params(self) -> Dict[str, Any]:
        return {"branching": self.branching, "seed": self.seed}


def build_kmeans_tree(data: MaterialDataset, k: int = DEFAULT_BRANCHING, seed: int = 0) -> KMeansTreeIndex:
    """Split recursively into k clusters until a cluster fits a bucket of k^2 points"""
    if k < 2:
        raise ContractViolationError(f"k-means tree branching must be >= 2, got {k}")
    points = data.mapped
    if points is None:
        raise ContractViolationError("data set has no mapped coordinates; bind a metric first")
    started = time.perf_counter()
    # one KMeans random_state per split, drawn in build order
    rng = np.random.Generator(np.random.PCG64(seed))
    bucket = k * k
    perm = np.arange(points.shape[0], dtype=np.int64)
    centers, radius, first_child, n_children, start, stop = [], [], [], [], [], []

    def new_node(lo: int, hi: int) -> int:
        members = points[perm[lo:hi]]
        center = members.mean(axis=0)
        diff = members - center
        centers.append(center)
        radius.append(float(np.sqrt(np.einsum("ij,ij->i", diff, diff).max())))
        first_child.append(-1)
        n_children.append(0)
        start.append(lo)
        stop.append(hi)
        return len(radius) - 1

    stack = [new_node(0, perm.size)]
    while stack:
        node = stack.pop()
        lo, hi = start[node], stop[node]
        if hi - lo <= bucket:
            continue
        ids = perm[lo:hi]
        node_seed = int(rng.integers(np.iinfo(np.int32).max))
        groups = [ids[g] for g in cluster_node(points[ids], k, node_seed)]
        if len(groups) < 2:
            continue
        perm[lo:hi] = np.concatenate(groups)
        offset = lo
        children = []
        for group in groups:
            children.append(new_node(offset, offset + group.size))
            offset += group.size
        first_child[node] = children[0]
        n_children[node] = len(children)
        stack.extend(reversed(children))

    index = KMeansTreeIndex(
        data, k, seed,
        centers=np.asarray(centers, dtype=np.float64).reshape(-1, points.shape[1]),
        radius=np.asarray(radius, dtype=np.float64),
        first_child=np.asarray(first_child, dtype=np.int64),
        n_children=np.asarray(n_children, dtype=np.int64),
        start=np.asarray(start, dtype=np.int64),
        stop=np.asarray(stop, dtype=np.int64),
        perm=perm,
    )
    index.build_time_s = time.perf_counter() - started
    logger.info("built %d-means tree: %d points, %d nodes, depth %d in %.3f s",
                k, index.n_points, index.n_nodes, index.depth(), index.build_time_s)
    return index


def _search(index: KMeansTreeIndex, node: int, probe: DistanceProbe, f_d: float) -> None:
    if index.is_leaf(node):
        probe.evaluate(index.node_ids(node))
        return
    children = index.children(node)
    center_d2 = probe.measure(index.centers[children])
    order = np.lexsort((children, center_d2))
    _search(index, int(children[order[0]]), probe, f_d)
    for j in order[1:]:
        child = int(children[j])
        if not probe.full:
            _search(index, child, probe, f_d)
        elif f_d > 0 and np.sqrt(center_d2[j]) - f_d * index.radius[child] < np.sqrt(probe.prune_dist_sq):
            _search(index, child, probe, f_d)


def km_query(index: KMeansTreeIndex, q, params: QueryParams = QueryParams()) -> QueryResult:
    """Nearest-center descent; a skipped cluster is visited iff d(x, q) - f_d d_r < d_c"""
    prune_rank = 2 if params.track_second and index.n_points > 1 else 1
    probe = DistanceProbe(index.points, as_query(q), keep=2, prune_rank=prune_rank)
    _search(index, 0, probe, params.f_d)
    return probe.result(second_exact=prune_rank == 2 and params.f_d == 1.0)
