"""
Tests for the k-d tree index and its relaxed backtracking
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from conftest import bound_from_mapped
from ddsearch.errors import ContractViolationError
from ddsearch.models import QueryParams
from ddsearch.search import LinearIndex, build_kdtree, linear_query

TOL = 1e-12


def leaves(tree):
    return [node for node in range(tree.n_nodes) if tree.is_leaf(node)]


def test_small_set_is_a_single_leaf(rng):
    tree = build_kdtree(bound_from_mapped(rng.normal(size=(16, 12))), leaf_size=16)
    assert tree.n_nodes == 1 and tree.depth() == 1


def test_leaves_partition_the_data(random_cloud):
    tree = build_kdtree(random_cloud, leaf_size=16)
    ids = np.concatenate([tree.leaf_ids(node) for node in leaves(tree)])
    np.testing.assert_array_equal(np.sort(ids), np.arange(random_cloud.n_points))
    assert max(tree.leaf_ids(node).size for node in leaves(tree)) <= 16


def test_depth_is_logarithmic(random_cloud):
    tree = build_kdtree(random_cloud, leaf_size=16)
    assert tree.depth() <= int(np.ceil(np.log2(random_cloud.n_points / 16))) + 1


def test_median_splits_are_balanced(rng):
    mapped = np.zeros((18, 12))
    mapped[:, :2] = rng.uniform(size=(18, 2))
    tree = build_kdtree(bound_from_mapped(mapped), leaf_size=2)
    for node in range(tree.n_nodes):
        if not tree.is_leaf(node):
            n_low = tree.stop[tree.low[node]] - tree.start[tree.low[node]]
            n_high = tree.stop[tree.high[node]] - tree.start[tree.high[node]]
            assert abs(n_low - n_high) <= 1
            assert tree.split_dim[node] in (0, 1)


def test_identical_points_stay_in_one_leaf():
    tree = build_kdtree(bound_from_mapped(np.ones((50, 12))), leaf_size=4)
    assert tree.n_nodes == 1
    result = tree.query(np.zeros(12))
    assert result.best_id == 0 and result.comparisons == 50


def test_exact_at_full_accuracy(material_data, rng):
    tree = build_kdtree(material_data)
    spread = material_data.mapped.std(axis=0)
    queries = material_data.mapped[rng.integers(material_data.n_points, size=500)] + rng.normal(size=(500, 12)) * spread * 0.05
    for q in queries:
        result = tree.query(q, QueryParams(f_d=1.0))
        exact = linear_query(material_data, q)
        assert result.best_id == exact.best_id
        assert result.best_dist_sq == pytest.approx(exact.best_dist_sq, rel=1e-12)


def test_no_backtracking_visits_one_leaf(random_cloud, rng):
    tree = build_kdtree(random_cloud, leaf_size=16)
    for q in rng.normal(size=(100, 12)):
        result = tree.query(q, QueryParams(f_d=0.0))
        assert result.comparisons <= 16
        assert result.best_dist_sq >= linear_query(random_cloud, q).best_dist_sq * (1 - TOL)


def test_accuracy_factor_trades_comparisons_for_recall(material_data, rng):
    tree = build_kdtree(material_data)
    queries = rng.normal(size=(300, 12)) * material_data.mapped.std(axis=0) + material_data.mapped.mean(axis=0)
    exact = [linear_query(material_data, q).best_dist_sq for q in queries]
    totals, recalls = [], []
    for f_d in (0.0, 0.2, 0.4, 0.6, 1.0):
        results = [tree.query(q, QueryParams(f_d=f_d)) for q in queries]
        totals.append(sum(r.comparisons for r in results))
        recalls.append(np.mean([r.best_dist_sq <= e * (1 + TOL) for r, e in zip(results, exact)]))
        assert all(r.best_dist_sq >= e * (1 - TOL) for r, e in zip(results, exact))
    assert totals == sorted(totals)
    assert recalls == sorted(recalls) and recalls[-1] == 1.0


def test_far_queries_cost_more_than_near_ones(material_data, rng):
    tree = build_kdtree(material_data)
    near = material_data.mapped[:200] + 1e-6
    spread = material_data.mapped.std(axis=0)
    far = material_data.mapped.mean(axis=0) + 3.0 * spread * rng.choice([-1.0, 1.0], size=(200, 12))
    cost = lambda queries: np.mean([tree.query(q).comparisons for q in queries])
    assert cost(far) > cost(near)


def test_second_tracking_gives_the_exact_runner_up(random_cloud, rng):
    tree = build_kdtree(random_cloud)
    for q in rng.normal(size=(100, 12)):
        result = tree.query(q, QueryParams(track_second=True))
        exact = linear_query(random_cloud, q)
        assert result.second_exact
        assert result.second_dist_sq == pytest.approx(exact.second_dist_sq, rel=1e-12)
    assert not tree.query(np.zeros(12), QueryParams(f_d=0.5, track_second=True)).second_exact


def test_knn_matches_linear_scan(random_cloud, rng):
    tree = build_kdtree(random_cloud)
    linear = LinearIndex(random_cloud)
    for q in rng.normal(size=(30, 12)):
        ids, dists, comparisons = tree.knn(q, 5)
        expected_ids, expected_dists, _ = linear.knn(q, 5)
        np.testing.assert_array_equal(ids, expected_ids)
        np.testing.assert_allclose(dists, expected_dists, rtol=1e-12)
        assert comparisons <= random_cloud.n_points


def test_build_is_deterministic(random_cloud):
    a = build_kdtree(random_cloud)
    b = build_kdtree(random_cloud)
    for name, array in a.arrays().items():
        np.testing.assert_array_equal(b.arrays()[name], array)


def test_invalid_leaf_size(random_cloud):
    with pytest.raises(ContractViolationError):
        build_kdtree(random_cloud, leaf_size=0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
