"""
Tests for the linear-scan oracle, distance counting, the moving-query skip rule
and index persistence
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from conftest import bound_from_mapped
from ddsearch.errors import ContractViolationError, EmptyDatasetError, IndexFormatError, InvalidStateError
from ddsearch.material import sample_dataset
from ddsearch.models import BackendKind, MaterialDataset, QueryParams, QueryResult
from ddsearch.phase_space import MetricC, bind_metric
from ddsearch.search import (
    DistanceProbe,
    LinearIndex,
    build_index,
    linear_query,
    load_index,
    reuse_previous,
    save_index,
    should_skip,
)


def e1(scale: float) -> np.ndarray:
    v = np.zeros(12)
    v[0] = scale
    return v


def test_query_on_a_data_point(random_cloud):
    result = linear_query(random_cloud, random_cloud.mapped[7])
    assert result.best_id == 7
    assert result.best_dist_sq == 0.0
    assert result.comparisons == random_cloud.n_points
    assert result.second_exact


def test_single_point_has_no_runner_up():
    result = linear_query(bound_from_mapped(np.ones((1, 12))), np.zeros(12))
    assert result.best_id == 0
    assert result.second_dist_sq is None
    assert not result.second_exact


def test_ties_go_to_the_smallest_index(rng):
    points = rng.normal(size=(20, 12))
    points[10] = points[3]
    q = points[3] + 1e-3
    assert linear_query(points, q).best_id == 3
    ids, _, _ = LinearIndex(bound_from_mapped(points)).knn(q, 2)
    assert list(ids) == [3, 10]


def test_matches_exhaustive_minimum(random_cloud, rng):
    for q in rng.normal(size=(50, 12)):
        diff = random_cloud.mapped - q
        dists = np.einsum("ij,ij->i", diff, diff)
        result = linear_query(random_cloud, q)
        assert result.best_id == int(np.argmin(dists))
        assert result.second_dist_sq == pytest.approx(np.sort(dists)[1])


def test_linear_query_errors():
    with pytest.raises(EmptyDatasetError):
        linear_query(np.empty((0, 12)), np.zeros(12))
    with pytest.raises(ContractViolationError):
        linear_query(sample_dataset(10), np.zeros(12))
    with pytest.raises(InvalidStateError):
        linear_query(np.zeros((3, 12)), np.zeros(11))


def test_index_requires_a_bound_data_set():
    with pytest.raises(ContractViolationError):
        LinearIndex(sample_dataset(10))


def test_probe_counts_and_keeps_the_best_two(rng):
    points = rng.normal(size=(10, 12))
    probe = DistanceProbe(points, points[4].copy())
    probe.evaluate([0, 1, 2])
    probe.evaluate([4], counted=False)
    probe.evaluate([4, 5])
    assert probe.comparisons == 5
    assert probe.ids[0] == 4 and probe.ids.size == 2
    assert probe.prune_dist_sq == 0.0
    assert probe.measure(points[:3]).shape == (3,)
    assert probe.comparisons == 8


def test_probe_prunes_on_the_second_distance_when_asked(rng):
    points = rng.normal(size=(5, 12))
    probe = DistanceProbe(points, np.zeros(12), keep=2, prune_rank=2)
    probe.evaluate([0])
    assert not probe.full and probe.prune_dist_sq == np.inf
    probe.evaluate([1])
    assert probe.full and probe.prune_dist_sq == probe.dists[1]


def test_skip_rule_examples():
    prev = QueryResult(best_id=0, best_dist_sq=1.0, second_dist_sq=1.5 ** 2)
    assert should_skip(prev, np.zeros(12), e1(0.2))
    assert not should_skip(prev, np.zeros(12), e1(0.3))


def test_skip_rule_edge_cases():
    prev = QueryResult(best_id=0, best_dist_sq=1.0, second_dist_sq=2.25)
    assert should_skip(prev, np.zeros(12), np.zeros(12))
    tied = QueryResult(best_id=0, best_dist_sq=1.0, second_dist_sq=1.0)
    assert not should_skip(tied, np.zeros(12), np.zeros(12))
    lonely = QueryResult(best_id=0, best_dist_sq=1.0)
    assert not should_skip(lonely, np.zeros(12), np.zeros(12))
    assert not should_skip(prev, np.zeros(12), e1(0.1), max_delta=0.05)
    assert should_skip(prev, np.zeros(12), e1(0.01), max_delta=0.05)
    # the reversed difference is never positive, so it never fires
    assert not should_skip(prev, np.zeros(12), np.zeros(12), as_printed=True)


def test_skip_rule_is_sound(rng):
    """A skip never keeps a point that stopped being the nearest one"""
    skips = 0
    for _ in range(10_000):
        points = rng.normal(size=(int(rng.integers(2, 6)), 12))
        q_prev = rng.normal(size=12)
        prev = linear_query(points, q_prev)
        q_now = q_prev + rng.normal(scale=rng.uniform(0.01, 1.0), size=12)
        if should_skip(prev, q_prev, q_now):
            skips += 1
            assert linear_query(points, q_now).best_id == prev.best_id
    assert skips > 0


def test_reuse_previous_answers_without_comparisons(rng):
    points = rng.normal(size=(6, 12))
    q_prev = points[2] + 0.01
    prev = linear_query(points, q_prev)
    q_now = q_prev + 0.001
    reused = reuse_previous(prev, points, q_prev, q_now)
    assert reused.skipped and reused.comparisons == 0
    assert reused.best_id == prev.best_id
    assert reused.best_dist_sq == pytest.approx(float(np.sum((points[2] - q_now) ** 2)))
    movement = np.linalg.norm(q_now - q_prev)
    assert reused.second_dist_sq == pytest.approx((np.sqrt(prev.second_dist_sq) - movement) ** 2)
    assert reused.second_dist_sq <= linear_query(points, q_now).second_dist_sq


def test_linear_knn_batch_matches_single_queries(random_cloud, rng):
    index = LinearIndex(random_cloud)
    queries = np.vstack([rng.normal(size=(300, 12)), random_cloud.mapped[:5]])
    ids, dists, comparisons = index.knn_batch(queries, 4)
    assert comparisons == queries.shape[0] * random_cloud.n_points
    for row, q in enumerate(queries):
        single_ids, single_dists, _ = index.knn(q, 4)
        np.testing.assert_array_equal(ids[row], single_ids)
        np.testing.assert_allclose(dists[row], single_dists, rtol=1e-12)


def test_build_index_dispatch(random_cloud):
    assert build_index(random_cloud, "linear").kind is BackendKind.LINEAR
    assert build_index(random_cloud, BackendKind.KDTREE).kind is BackendKind.KDTREE
    with pytest.raises(ContractViolationError):
        build_index(random_cloud, "graph", builder="graph")


@pytest.mark.parametrize("kind", list(BackendKind))
def test_index_files_round_trip(tmp_path, random_cloud, rng, kind):
    index = build_index(random_cloud, kind, graph_k=8, seed=5)
    path = save_index(index, tmp_path / f"{kind.value}.npz")
    loaded = load_index(path, random_cloud)
    assert loaded.kind is kind
    assert loaded.params() == index.params()
    for name, array in index.arrays().items():
        np.testing.assert_array_equal(loaded.arrays()[name], array)
    params = QueryParams(f_d=0.5, warm_start=3)
    for q in rng.normal(size=(20, 12)):
        assert loaded.query(q, params) == index.query(q, params)


def test_index_file_for_other_data_is_rejected(tmp_path, random_cloud):
    path = save_index(build_index(random_cloud, "kdtree"), tmp_path / "kd.npz")
    other = bound_from_mapped(random_cloud.mapped + 1.0)
    with pytest.raises(IndexFormatError):
        load_index(path, other)
    rebound = MaterialDataset(points=random_cloud.points, mapped=random_cloud.mapped, metric=MetricC.scaled_identity(2.0))
    with pytest.raises(IndexFormatError):
        load_index(path, rebound)


def test_unreadable_index_file(tmp_path, random_cloud):
    path = tmp_path / "garbage.npz"
    path.write_bytes(b"not an archive")
    with pytest.raises(IndexFormatError):
        load_index(path, random_cloud)


def test_memory_and_build_stats():
    data = bind_metric(sample_dataset(300, seed=1), MetricC.scaled_identity(1000.0))
    index = build_index(data, "kmeans")
    stats = index.build_stats()
    assert stats["kind"] == "kmeans" and stats["memory_bytes"] > 0 and stats["branching"] == 4


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
