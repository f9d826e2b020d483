"""
Tests for the hexahedral mesh, stiffness assembly and the constraint projection P_C
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from ddsearch.errors import ContractViolationError, ConvergenceError
from ddsearch.fem import (
    BoundaryConditions,
    assemble_K,
    build_mesh,
    export_nodes_csv,
    export_points_csv,
    project_constraint,
    reference_solution,
    twist_bcs,
)
from ddsearch.material import eval_material_batch, material_tangent
from ddsearch.models import MaterialParams
from ddsearch.phase_space import MetricC

SIGNS = np.array([[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
                  [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]], dtype=float)


def box_element_stiffness(h: float, c: np.ndarray) -> np.ndarray:
    """Dense 24x24 stiffness of an axis-aligned cube element of edge h"""
    ke = np.zeros((24, 24))
    for xi in SIGNS / np.sqrt(3.0):
        dn = np.empty((8, 3))
        for a, s in enumerate(SIGNS):
            f = 1.0 + s * xi
            dn[a] = 0.125 * s * np.array([f[1] * f[2], f[0] * f[2], f[0] * f[1]]) * (2.0 / h)
        b = np.zeros((6, 24))
        for a in range(8):
            b[0, 3 * a], b[1, 3 * a + 1], b[2, 3 * a + 2] = dn[a]
            b[3, 3 * a], b[3, 3 * a + 1] = dn[a, 1], dn[a, 0]
            b[4, 3 * a], b[4, 3 * a + 2] = dn[a, 2], dn[a, 0]
            b[5, 3 * a + 1], b[5, 3 * a + 2] = dn[a, 2], dn[a, 1]
        ke += (h / 2.0) ** 3 * b.T @ c @ b
    return ke


def bottom_dofs(mesh) -> np.ndarray:
    bottom = np.flatnonzero(np.isclose(mesh.nodes[:, 2], 0.0))
    return (3 * bottom[:, None] + np.arange(3)).ravel()


def test_single_element_mesh():
    mesh = build_mesh(10.0, 1)
    assert mesh.n_nodes == 8
    assert mesh.n_points == 8
    assert mesh.ip_weights.sum() == pytest.approx(1000.0, rel=1e-12)


def test_mesh_sizes():
    mesh = build_mesh(10.0, 20)
    assert mesh.n_elements == 8000
    assert mesh.n_points == 64_000
    assert mesh.n_nodes == 21 ** 3
    assert mesh.ip_weights.sum() == pytest.approx(1000.0, rel=1e-12)


def test_mesh_is_centered_on_the_z_axis():
    mesh = build_mesh(10.0, 4)
    np.testing.assert_allclose(mesh.nodes.min(axis=0), [-5.0, -5.0, 0.0])
    np.testing.assert_allclose(mesh.nodes.max(axis=0), [5.0, 5.0, 10.0])
    gauss = mesh.gauss_coordinates
    assert gauss.shape == (mesh.n_points, 3)
    assert np.all(np.abs(gauss[:, :2]) < 5.0) and np.all((gauss[:, 2] > 0) & (gauss[:, 2] < 10.0))


def test_invalid_mesh_arguments():
    with pytest.raises(ContractViolationError):
        build_mesh(10.0, 0)
    with pytest.raises(ContractViolationError):
        build_mesh(-1.0, 2)


def test_twist_corner_displacement():
    mesh = build_mesh(10.0, 2)
    bcs = twist_bcs(mesh, 2.0)
    corner = np.flatnonzero(np.all(np.isclose(mesh.nodes, [5.0, 5.0, 10.0]), axis=1))[0]
    values = dict(zip(bcs.prescribed, bcs.values))
    ux, uy, uz = (values[3 * corner + k] for k in range(3))
    assert np.hypot(ux, uy) == pytest.approx(0.24682, abs=1e-5)
    assert uz == 0.0


def test_twist_keeps_the_axis_in_place():
    mesh = build_mesh(10.0, 2)
    bcs = twist_bcs(mesh, 2.0)
    axis = np.flatnonzero(np.all(np.isclose(mesh.nodes, [0.0, 0.0, 10.0]), axis=1))[0]
    values = dict(zip(bcs.prescribed, bcs.values))
    assert all(abs(values[3 * axis + k]) < 1e-15 for k in range(3))


def test_zero_twist_prescribes_zeros():
    bcs = twist_bcs(build_mesh(10.0, 3), 0.0)
    np.testing.assert_array_equal(bcs.values, 0.0)


def test_twist_partitions_the_dofs():
    mesh = build_mesh(10.0, 3)
    bcs = twist_bcs(mesh, 2.0)
    assert bcs.fixed.size == bcs.prescribed.size == 3 * 16
    everything = np.sort(np.concatenate([bcs.fixed, bcs.prescribed, bcs.free]))
    np.testing.assert_array_equal(everything, np.arange(mesh.n_dofs))


def test_boundary_conditions_validation():
    with pytest.raises(ContractViolationError):
        BoundaryConditions.from_dirichlet(12, fixed=[0, 1], prescribed=[1], values=[0.0])
    with pytest.raises(ContractViolationError):
        BoundaryConditions.from_dirichlet(12, fixed=[12])
    with pytest.raises(ContractViolationError):
        BoundaryConditions.from_dirichlet(12, fixed=[], prescribed=[3, 4], values=[1.0])


def test_stiffness_is_symmetric_and_spd():
    mesh = build_mesh(10.0, 3)
    sys_ = assemble_K(mesh, MetricC.scaled_identity(1000.0), twist_bcs(mesh, 2.0))
    k = sys_.stiffness
    assert abs(k - k.T).max() <= 1e-12 * abs(k).max()
    assert np.all(sys_.factor.U.diagonal() > 0)


def test_rigid_body_motions_are_in_the_null_space():
    mesh = build_mesh(10.0, 2)
    k = assemble_K(mesh, MetricC.scaled_identity(1000.0), twist_bcs(mesh, 0.0)).stiffness
    x, y, z = mesh.nodes.T
    motions = [
        np.tile([1.0, 0.0, 0.0], mesh.n_nodes),
        np.tile([0.0, 0.0, 1.0], mesh.n_nodes),
        np.column_stack([-y, x, np.zeros_like(x)]).ravel(),
        np.column_stack([z, np.zeros_like(x), -x]).ravel(),
    ]
    scale = abs(k).max()
    for u in motions:
        assert np.abs(k @ u).max() <= 1e-10 * scale * np.abs(u).max()


def test_single_element_matches_dense_oracle():
    mesh = build_mesh(2.0, 1)
    c = np.diag([3.0, 2.0, 1.0, 0.5, 0.7, 0.9])
    bcs = BoundaryConditions.from_dirichlet(mesh.n_dofs, fixed=bottom_dofs(mesh))
    sys_ = assemble_K(mesh, MetricC.from_matrix(c), bcs)
    dofs = mesh.element_dofs[0]
    oracle = np.zeros((24, 24))
    oracle[np.ix_(dofs, dofs)] = box_element_stiffness(2.0, c)
    np.testing.assert_allclose(sys_.stiffness.toarray(), oracle, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(sys_.k_free.toarray(), oracle[np.ix_(bcs.free, bcs.free)], rtol=1e-12, atol=1e-12)


def test_projection_matches_dense_solve(rng):
    mesh = build_mesh(2.0, 1)
    metric = MetricC.scaled_identity(10.0)
    bcs = BoundaryConditions.from_dirichlet(mesh.n_dofs, fixed=bottom_dofs(mesh))
    sys_ = assemble_K(mesh, metric, bcs)
    assigned = rng.normal(size=(mesh.n_points, 12))
    projection = project_constraint(sys_, mesh, bcs, metric, assigned)
    dense = sys_.k_free.toarray()
    rhs = mesh.scatter(assigned[:, :6] @ metric.matrix)[bcs.free]
    np.testing.assert_allclose(projection.u[bcs.free], np.linalg.solve(dense, rhs), rtol=1e-10, atol=1e-12)
    np.testing.assert_array_equal(projection.u[bcs.fixed], 0.0)


def test_patch_test_reproduces_constant_strain():
    mesh = build_mesh(10.0, 3)
    metric = MetricC.scaled_identity(1000.0)
    g = np.array([[1.0, 0.5, -0.2], [0.3, -1.0, 0.4], [0.1, 0.2, 0.6]]) * 1e-3
    interior = np.all((mesh.nodes[:, :2] > -5.0 + 1e-9) & (mesh.nodes[:, :2] < 5.0 - 1e-9), axis=1) & (
        (mesh.nodes[:, 2] > 1e-9) & (mesh.nodes[:, 2] < 10.0 - 1e-9)
    )
    boundary = np.flatnonzero(~interior)
    prescribed = (3 * boundary[:, None] + np.arange(3)).ravel()
    values = (mesh.nodes[boundary] @ g.T).ravel()
    bcs = BoundaryConditions.from_dirichlet(mesh.n_dofs, fixed=[], prescribed=prescribed, values=values)
    sys_ = assemble_K(mesh, metric, bcs)
    projection = project_constraint(sys_, mesh, bcs, metric, np.zeros((mesh.n_points, 12)))
    sym = 0.5 * (g + g.T)
    expected = np.array([sym[0, 0], sym[1, 1], sym[2, 2], 2 * sym[0, 1], 2 * sym[0, 2], 2 * sym[1, 2]])
    np.testing.assert_allclose(projection.states[:, :6], np.tile(expected, (mesh.n_points, 1)), atol=1e-12)
    np.testing.assert_allclose(projection.states[:, 6:], 0.0, atol=1e-12)


def test_projection_is_idempotent(rng):
    mesh = build_mesh(10.0, 2)
    metric = MetricC.scaled_identity(1000.0)
    bcs = twist_bcs(mesh, 2.0)
    sys_ = assemble_K(mesh, metric, bcs)
    z = np.hstack([rng.normal(scale=0.01, size=(mesh.n_points, 6)), rng.normal(scale=10.0, size=(mesh.n_points, 6))])
    y = project_constraint(sys_, mesh, bcs, metric, z).states
    again = project_constraint(sys_, mesh, bcs, metric, y).states
    np.testing.assert_allclose(again, y, rtol=0, atol=1e-9 * np.abs(y).max())


def test_projected_stresses_are_equilibrated(rng):
    mesh = build_mesh(10.0, 2)
    metric = MetricC.scaled_identity(1000.0)
    bcs = twist_bcs(mesh, 2.0)
    sys_ = assemble_K(mesh, metric, bcs)
    z = rng.normal(size=(mesh.n_points, 12))
    y = project_constraint(sys_, mesh, bcs, metric, z).states
    internal = mesh.scatter(y[:, 6:])[bcs.free]
    assert np.abs(internal).max() <= 1e-9 * np.abs(mesh.scatter(z[:, 6:])).max()


def test_zero_problem_projects_to_zero():
    mesh = build_mesh(10.0, 2)
    metric = MetricC.scaled_identity(1000.0)
    bcs = twist_bcs(mesh, 0.0)
    sys_ = assemble_K(mesh, metric, bcs)
    projection = project_constraint(sys_, mesh, bcs, metric, np.zeros((mesh.n_points, 12)))
    np.testing.assert_array_equal(projection.states, 0.0)


def test_single_element_twist_has_no_free_dofs():
    mesh = build_mesh(10.0, 1)
    metric = MetricC.scaled_identity(1000.0)
    bcs = twist_bcs(mesh, 2.0)
    sys_ = assemble_K(mesh, metric, bcs)
    assert bcs.free.size == 0 and sys_.factor is None
    projection = project_constraint(sys_, mesh, bcs, metric, np.ones((mesh.n_points, 12)))
    u = np.zeros(mesh.n_dofs)
    u[bcs.prescribed] = bcs.values
    np.testing.assert_allclose(projection.states[:, :6], mesh.strain(u))


def test_factorization_handle_is_reused(rng):
    mesh = build_mesh(10.0, 2)
    metric = MetricC.scaled_identity(1000.0)
    bcs = twist_bcs(mesh, 2.0)
    sys_ = assemble_K(mesh, metric, bcs)
    factor = sys_.factor
    for _ in range(3):
        project_constraint(sys_, mesh, bcs, metric, rng.normal(size=(mesh.n_points, 12)))
    assert sys_.factor is factor


def test_projection_contract_checks():
    mesh = build_mesh(10.0, 2)
    metric = MetricC.scaled_identity(1000.0)
    bcs = twist_bcs(mesh, 2.0)
    sys_ = assemble_K(mesh, metric, bcs)
    with pytest.raises(ContractViolationError):
        project_constraint(sys_, mesh, bcs, metric, np.zeros((mesh.n_points - 1, 12)))
    with pytest.raises(ContractViolationError):
        project_constraint(sys_, mesh, twist_bcs(mesh, 2.0), metric, np.zeros((mesh.n_points, 12)))
    with pytest.raises(ContractViolationError):
        project_constraint(sys_, mesh, bcs, MetricC.scaled_identity(1.0), np.zeros((mesh.n_points, 12)))


def test_reference_solution_without_twist_is_zero():
    mesh = build_mesh(10.0, 2)
    u = reference_solution(mesh, twist_bcs(mesh, 0.0), MaterialParams())
    np.testing.assert_array_equal(u, 0.0)


def test_linear_reference_converges_in_one_step():
    mesh = build_mesh(10.0, 2)
    bcs = twist_bcs(mesh, 2.0)
    p = MaterialParams(alpha=0.0)
    u = reference_solution(mesh, bcs, p, max_steps=1)
    # with alpha = 0 the problem is the linear one P_C solves with C = D and no data
    d = MetricC.from_matrix(material_tangent(np.zeros((1, 6)), p)[0])
    sys_ = assemble_K(mesh, d, bcs)
    linear = project_constraint(sys_, mesh, bcs, d, np.zeros((mesh.n_points, 12))).u
    np.testing.assert_allclose(u, linear, rtol=1e-8, atol=1e-10 * np.abs(u).max())


def test_nonlinear_reference_is_equilibrated():
    mesh = build_mesh(10.0, 2)
    bcs = twist_bcs(mesh, 4.0)
    p = MaterialParams()
    u = reference_solution(mesh, bcs, p)
    stresses = eval_material_batch(mesh.strain(u), p)
    internal = mesh.scatter(stresses)
    assert np.linalg.norm(internal[bcs.free]) <= 1e-6 * np.linalg.norm(internal[bcs.dirichlet])
    with pytest.raises(ConvergenceError):
        reference_solution(mesh, bcs, p, max_steps=1)


def test_exports(tmp_path):
    mesh = build_mesh(10.0, 1)
    u = np.zeros(mesh.n_dofs)
    nodes = export_nodes_csv(mesh, u, tmp_path / "nodes.csv")
    points = export_points_csv(mesh, np.zeros((mesh.n_points, 12)), tmp_path / "points.csv")
    assert nodes.read_text().splitlines()[0] == "node_id,x,y,z,ux,uy,uz"
    header = points.read_text().splitlines()[0].split(",")
    assert header[:4] == ["point_id", "x", "y", "z"] and len(header) == 16


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
