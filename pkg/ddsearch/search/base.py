"""
Nearest-neighbor index contract, distance counting, the linear-scan oracle
and the moving-query skip rule

Every index searches the mapped 12-d coordinates of a bound MaterialDataset
with the plain squared Euclidean norm. All distance evaluations of a query go
through one DistanceProbe, which is where comparisons are counted.
"""

import logging
from abc import ABC, abstractmethod
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from ..errors import ContractViolationError, EmptyDatasetError, InvalidStateError
from ..models import PHASE_SIZE, BackendKind, MaterialDataset, QueryParams, QueryResult

logger = logging.getLogger(__name__)

KNN_BLOCK = 256
KNN_CANDIDATE_SLACK = 8


def as_query(q: Any) -> np.ndarray:
    """Validate a mapped query point"""
    vec = np.asarray(q, dtype=np.float64).reshape(-1)
    if vec.shape != (PHASE_SIZE,):
        raise InvalidStateError(f"mapped query needs {PHASE_SIZE} coordinates, got {vec.size}")
    if not np.all(np.isfinite(vec)):
        raise InvalidStateError("mapped query has non-finite coordinates")
    return vec


class DistanceProbe:
    """
    Evaluates distances from one query to data points and keeps the best `keep`
    (smallest distance, then smallest id). The prune distance is the entry at
    `prune_rank` (infinite until that many points were seen).
    """

    def __init__(self, points: np.ndarray, query: np.ndarray, keep: int = 2, prune_rank: int = 1):
        self._points = points
        self.query = query
        self.prune_rank = prune_rank
        self.keep = max(keep, prune_rank)
        self.comparisons = 0
        self.ids = np.empty(0, dtype=np.int64)
        self.dists = np.empty(0, dtype=np.float64)

    def evaluate(self, ids, counted: bool = True) -> np.ndarray:
        """Squared distances to points[ids]; uncounted evaluations seed a search start"""
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        diff = self._points[ids] - self.query
        dists = np.einsum("ij,ij->i", diff, diff)
        if counted:
            self.comparisons += ids.size
        self._merge(ids, dists)
        return dists

    def measure(self, coordinates: np.ndarray) -> np.ndarray:
        """Counted squared distances to arbitrary coordinates (cluster centers)"""
        diff = np.asarray(coordinates) - self.query
        self.comparisons += diff.shape[0]
        return np.einsum("ij,ij->i", diff, diff)

    def _merge(self, ids: np.ndarray, dists: np.ndarray) -> None:
        ids = np.concatenate([self.ids, ids])
        dists = np.concatenate([self.dists, dists])
        order = np.lexsort((ids, dists))
        ids, dists = ids[order], dists[order]
        _, first = np.unique(ids, return_index=True)
        kept = np.sort(first)[:self.keep]
        self.ids, self.dists = ids[kept], dists[kept]

    @property
    def full(self) -> bool:
        return self.ids.size >= self.prune_rank

    @property
    def prune_dist_sq(self) -> float:
        return float(self.dists[self.prune_rank - 1]) if self.full else np.inf

    def result(self, hops: int = 0, second_exact: bool = True) -> QueryResult:
        if self.ids.size == 0:
            raise EmptyDatasetError("query evaluated no data points")
        second = float(self.dists[1]) if self.ids.size > 1 else None
        return QueryResult(
            best_id=int(self.ids[0]),
            best_dist_sq=float(self.dists[0]),
            second_dist_sq=second,
            comparisons=self.comparisons,
            hops=hops,
            second_exact=second_exact and second is not None,
        )


def _points_of(data: Union[MaterialDataset, np.ndarray]) -> np.ndarray:
    if isinstance(data, MaterialDataset):
        if data.mapped is None:
            raise ContractViolationError("data set has no mapped coordinates; bind a metric first")
        return data.mapped
    points = np.asarray(data, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise EmptyDatasetError("linear scan over an empty point set")
    return points


def linear_query(data: Union[MaterialDataset, np.ndarray], q) -> QueryResult:
    """Exact 1-NN and 2-NN by a full scan; ties go to the smallest index"""
    points = _points_of(data)
    q = as_query(q)
    diff = points - q
    dists = np.einsum("ij,ij->i", diff, diff)
    best = int(np.argmin(dists))
    second = None
    if dists.size > 1:
        masked = dists.copy()
        masked[best] = np.inf
        second = float(masked[int(np.argmin(masked))])
    return QueryResult(
        best_id=best,
        best_dist_sq=float(dists[best]),
        second_dist_sq=second,
        comparisons=int(dists.size),
        second_exact=second is not None,
    )


def should_skip(
    prev: QueryResult,
    q_prev,
    q_now,
    max_delta: Optional[float] = None,
    as_printed: bool = False,
) -> bool:
    """
    True when the query moved less than delta = (d2 - d1) / 2 since `prev` was
    answered, so prev.best_id is still the nearest point. `max_delta` caps delta;
    `as_printed` uses (d1 - d2) / 2, which is never positive.
    """
    if prev.second_dist_sq is None:
        return False
    d1 = np.sqrt(prev.best_dist_sq)
    d2 = np.sqrt(prev.second_dist_sq)
    delta = (d1 - d2) / 2.0 if as_printed else (d2 - d1) / 2.0
    if max_delta is not None:
        delta = min(delta, max_delta)
    movement = float(np.linalg.norm(np.asarray(q_now) - np.asarray(q_prev)))
    return movement < delta


def reuse_previous(prev: QueryResult, points: np.ndarray, q_prev, q_now) -> QueryResult:
    """
    Answer a skipped query from its previous result. The best distance is
    refreshed without counting; the second distance becomes the lower bound
    (d2 - movement)^2 so further skips stay sound.
    """
    q_now = np.asarray(q_now, dtype=np.float64)
    movement = float(np.linalg.norm(q_now - np.asarray(q_prev)))
    diff = points[prev.best_id] - q_now
    second = None
    if prev.second_dist_sq is not None:
        second = max(np.sqrt(prev.second_dist_sq) - movement, 0.0) ** 2
    return QueryResult(
        best_id=prev.best_id,
        best_dist_sq=float(diff @ diff),
        second_dist_sq=second,
        comparisons=0,
        hops=0,
        skipped=True,
        second_exact=prev.second_exact,
    )


class NnIndex(ABC):
    """Immutable nearest-neighbor index over a bound data set"""

    kind: BackendKind

    def __init__(self, data: MaterialDataset):
        if not data.is_bound:
            raise ContractViolationError("index needs a data set bound to a metric (phase_space.bind_metric)")
        self.data = data
        self.points = data.mapped
        self.build_time_s = 0.0

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def metric(self):
        return self.data.metric

    @abstractmethod
    def query(self, q, params: QueryParams = QueryParams()) -> QueryResult:
        """Nearest data point to a mapped query"""

    @abstractmethod
    def knn(self, q, count: int, f_d: float = 1.0) -> Tuple[np.ndarray, np.ndarray, int]:
        """The `count` nearest ids, their squared distances and the comparison count"""

    def knn_batch(self, queries: np.ndarray, count: int, f_d: float = 1.0) -> Tuple[np.ndarray, np.ndarray, int]:
        count = min(count, self.n_points)
        ids = np.empty((queries.shape[0], count), dtype=np.int64)
        dists = np.empty((queries.shape[0], count))
        total = 0
        for row, q in enumerate(queries):
            ids[row], dists[row], comparisons = self.knn(q, count, f_d)
            total += comparisons
        return ids, dists, total

    @abstractmethod
    def arrays(self) -> Dict[str, np.ndarray]:
        """Structure arrays, as serialized by search.storage"""

    def params(self) -> Dict[str, Any]:
        """Build parameters recorded next to the arrays"""
        return {}

    @property
    def memory_bytes(self) -> int:
        return int(sum(a.nbytes for a in self.arrays().values()))

    def build_stats(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "build_time_s": self.build_time_s,
            "memory_bytes": self.memory_bytes,
            **self.params(),
        }

    def __repr__(self) -> str:
        return f"{type(self).__name__}(N={self.n_points}, {self.params()})"


class LinearIndex(NnIndex):
    """Brute-force scan; always exact"""

    kind = BackendKind.LINEAR

    def query(self, q, params: QueryParams = QueryParams()) -> QueryResult:
        return linear_query(self.points, q)

    def knn(self, q, count: int, f_d: float = 1.0) -> Tuple[np.ndarray, np.ndarray, int]:
        q = as_query(q)
        diff = self.points - q
        dists = np.einsum("ij,ij->i", diff, diff)
        order = np.lexsort((np.arange(dists.size), dists))[:min(count, dists.size)]
        return order.astype(np.int64), dists[order], int(dists.size)

    def knn_batch(self, queries: np.ndarray, count: int, f_d: float = 1.0) -> Tuple[np.ndarray, np.ndarray, int]:
        """Blocked brute force: candidates from the dot-product expansion, re-ranked by exact distances"""
        queries = np.asarray(queries, dtype=np.float64)
        n = self.n_points
        count = min(count, n)
        take = min(n, count + KNN_CANDIDATE_SLACK)
        norms = np.einsum("ij,ij->i", self.points, self.points)
        ids = np.empty((queries.shape[0], count), dtype=np.int64)
        dists = np.empty((queries.shape[0], count))
        for start in range(0, queries.shape[0], KNN_BLOCK):
            block = queries[start:start + KNN_BLOCK]
            approx = norms[None, :] + np.einsum("ij,ij->i", block, block)[:, None] - 2.0 * block @ self.points.T
            if take < n:
                candidates = np.argpartition(approx, take - 1, axis=1)[:, :take]
            else:
                candidates = np.broadcast_to(np.arange(n), approx.shape)
            diff = self.points[candidates] - block[:, None, :]
            exact = np.einsum("bcj,bcj->bc", diff, diff)
            order = np.lexsort((candidates, exact), axis=-1)[:, :count]
            ids[start:start + block.shape[0]] = np.take_along_axis(candidates, order, axis=1)
            dists[start:start + block.shape[0]] = np.take_along_axis(exact, order, axis=1)
        return ids, dists, int(queries.shape[0] * n)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {}
