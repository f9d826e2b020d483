"""
12-d tree with median splits on the maximum-spread dimension

Nodes live in flat arrays. A node is a leaf when `low[node] == -1`; its points
are perm[start[node]:stop[node]]. Inner nodes send coordinates <= split_value
to the low child and the rest to the high child.
"""

import logging
import time
from typing import Any, Dict, Tuple

import numpy as np

from ..errors import ContractViolationError
from ..models import BackendKind, MaterialDataset, QueryParams, QueryResult
from .base import DistanceProbe, NnIndex, as_query

logger = logging.getLogger(__name__)

DEFAULT_LEAF_SIZE = 16


class KdTreeIndex(NnIndex):
    """k-d tree over the mapped coordinates"""

    kind = BackendKind.KDTREE

    def __init__(self, data: MaterialDataset, leaf_size: int, split_dim, split_value, low, high, start, stop, perm):
        super().__init__(data)
        self.leaf_size = leaf_size
        self.split_dim = split_dim
        self.split_value = split_value
        self.low = low
        self.high = high
        self.start = start
        self.stop = stop
        self.perm = perm

    @property
    def n_nodes(self) -> int:
        return self.low.size

    def is_leaf(self, node: int) -> bool:
        return self.low[node] < 0

    def leaf_ids(self, node: int) -> np.ndarray:
        return self.perm[self.start[node]:self.stop[node]]

    def depth(self) -> int:
        """Number of levels (a single leaf has depth 1)"""
        deepest = 0
        stack = [(0, 1)]
        while stack:
            node, level = stack.pop()
            deepest = max(deepest, level)
            if not self.is_leaf(node):
                stack.append((int(self.low[node]), level + 1))
                stack.append((int(self.high[node]), level + 1))
        return deepest

    def query(self, q, params: QueryParams = QueryParams()) -> QueryResult:
        return kd_query(self, q, params)

    def knn(self, q, count: int, f_d: float = 1.0) -> Tuple[np.ndarray, np.ndarray, int]:
        count = min(count, self.n_points)
        probe = DistanceProbe(self.points, as_query(q), keep=count, prune_rank=count)
        _search(self, 0, probe, f_d)
        return probe.ids.copy(), probe.dists.copy(), probe.comparisons

    def arrays(self) -> Dict[str, np.ndarray]:
        return {
            "split_dim": self.split_dim, "split_value": self.split_value,
            "low": self.low, "high": self.high,
            "start": self.start, "stop": self.stop, "perm": self.perm,
        }

    def params(self) -> Dict[str, Any]:
        return {"leaf_size": self.leaf_size}


def _choose_split(points: np.ndarray):
    """(dimension, median value, low mask), or None if no dimension separates the points"""
    spreads = points.max(axis=0) - points.min(axis=0)
    mid = (points.shape[0] - 1) // 2
    for dim in np.argsort(-spreads, kind="stable"):
        if spreads[dim] <= 0:
            break
        coords = points[:, dim]
        value = np.partition(coords, mid)[mid]
        low_mask = coords <= value
        if low_mask.all():
            continue
        return int(dim), float(value), low_mask
    return None


def build_kdtree(data: MaterialDataset, leaf_size: int = DEFAULT_LEAF_SIZE) -> KdTreeIndex:
    """Recursive median split; identical points end up together in one leaf"""
    if leaf_size < 1:
        raise ContractViolationError(f"leaf_size must be >= 1, got {leaf_size}")
    started = time.perf_counter()
    points = data.mapped
    if points is None:
        raise ContractViolationError("data set has no mapped coordinates; bind a metric first")
    perm = np.arange(points.shape[0], dtype=np.int64)
    split_dim, split_value, low, high, start, stop = [], [], [], [], [], []

    def new_node(lo: int, hi: int) -> int:
        for column, value in ((split_dim, -1), (split_value, 0.0), (low, -1), (high, -1), (start, lo), (stop, hi)):
            column.append(value)
        return len(low) - 1

    stack = [new_node(0, perm.size)]
    while stack:
        node = stack.pop()
        lo, hi = start[node], stop[node]
        if hi - lo <= leaf_size:
            continue
        ids = perm[lo:hi]
        split = _choose_split(points[ids])
        if split is None:
            continue
        dim, value, low_mask = split
        n_low = int(low_mask.sum())
        perm[lo:hi] = np.concatenate([ids[low_mask], ids[~low_mask]])
        split_dim[node], split_value[node] = dim, value
        low[node] = new_node(lo, lo + n_low)
        high[node] = new_node(lo + n_low, hi)
        stack.extend((high[node], low[node]))

    index = KdTreeIndex(
        data, leaf_size,
        split_dim=np.asarray(split_dim, dtype=np.int64),
        split_value=np.asarray(split_value, dtype=np.float64),
        low=np.asarray(low, dtype=np.int64),
        high=np.asarray(high, dtype=np.int64),
        start=np.asarray(start, dtype=np.int64),
        stop=np.asarray(stop, dtype=np.int64),
        perm=perm,
    )
    index.build_time_s = time.perf_counter() - started
    logger.info("built k-d tree: %d points, %d nodes, depth %d in %.3f s",
                index.n_points, index.n_nodes, index.depth(), index.build_time_s)
    return index


def _search(index: KdTreeIndex, node: int, probe: DistanceProbe, f_d: float) -> None:
    if index.is_leaf(node):
        probe.evaluate(index.leaf_ids(node))
        return
    offset = probe.query[index.split_dim[node]] - index.split_value[node]
    if offset <= 0:
        near, far = index.low[node], index.high[node]
    else:
        near, far = index.high[node], index.low[node]
    _search(index, int(near), probe, f_d)
    # d_b^2 <= f_d^2 d_c^2; no backtracking at all for f_d = 0 once enough points are known
    if not probe.full or (f_d > 0 and offset * offset <= f_d * f_d * probe.prune_dist_sq):
        _search(index, int(far), probe, f_d)


def kd_query(index: KdTreeIndex, q, params: QueryParams = QueryParams()) -> QueryResult:
    """Descend to the query's leaf, then backtrack into far branches the relaxed bound admits"""
    prune_rank = 2 if params.track_second and index.n_points > 1 else 1
    probe = DistanceProbe(index.points, as_query(q), keep=2, prune_rank=prune_rank)
    _search(index, 0, probe, params.f_d)
    return probe.result(second_exact=prune_rank == 2 and params.f_d == 1.0)
