"""
Finite element layer: structured hexahedral mesh, strain-displacement operators,
stiffness assembly/factorization and the constraint-set projection P_C

Elements are 8-node trilinear hexahedra with 2x2x2 Gauss quadrature. The mesh is
a cube centered on the z-axis (x, y in [-side/2, side/2], z in [0, side]); all
elements are translates of each other, so one set of B matrices serves every
element. Dofs are numbered 3 * node + component.
"""

import logging
import time
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ContractViolationError, ConvergenceError, SingularSystemError
from .material import eval_material_batch, material_tangent
from .models import PHASE_SIZE, STRAIN_LABELS, STRESS_LABELS, VOIGT_SIZE, MaterialParams
from .phase_space import MetricC

logger = logging.getLogger(__name__)

NODES_PER_ELEMENT = 8
DOFS_PER_ELEMENT = 24
POINTS_PER_ELEMENT = 8
SOLVE_RTOL = 1e-10
NEWTON_RTOL = 1e-8
NEWTON_MAX_STEPS = 50

# Reference node order: bottom face counter-clockwise, then top face
_NODE_SIGNS = np.array(
    [[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
     [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]],
    dtype=np.float64,
)
_GAUSS_POINTS = _NODE_SIGNS / np.sqrt(3.0)


def _shape_gradients(xi: np.ndarray) -> np.ndarray:
    """dN_a / dxi_j at one reference point, shape (8, 3)"""
    factors = 1.0 + _NODE_SIGNS * xi[None, :]
    grads = np.empty((NODES_PER_ELEMENT, 3))
    for j in range(3):
        others = [l for l in range(3) if l != j]
        grads[:, j] = 0.125 * _NODE_SIGNS[:, j] * factors[:, others[0]] * factors[:, others[1]]
    return grads


def _b_matrix(dndx: np.ndarray) -> np.ndarray:
    """6x24 strain-displacement matrix, engineering shear, Voigt order 11 22 33 12 13 23"""
    b = np.zeros((VOIGT_SIZE, DOFS_PER_ELEMENT))
    for a in range(NODES_PER_ELEMENT):
        dx, dy, dz = dndx[a]
        c = 3 * a
        b[0, c] = dx
        b[1, c + 1] = dy
        b[2, c + 2] = dz
        b[3, c], b[3, c + 1] = dy, dx
        b[4, c], b[4, c + 2] = dz, dx
        b[5, c + 1], b[5, c + 2] = dz, dy
    return b


@dataclass(frozen=True, eq=False)
class BOperator:
    """B matrices and weights w = det(J) * gauss weight of the 8 points of an element"""
    matrices: np.ndarray
    weights: np.ndarray

    @classmethod
    def for_element(cls, coordinates: np.ndarray) -> "BOperator":
        matrices = np.empty((POINTS_PER_ELEMENT, VOIGT_SIZE, DOFS_PER_ELEMENT))
        weights = np.empty(POINTS_PER_ELEMENT)
        for g, xi in enumerate(_GAUSS_POINTS):
            grads = _shape_gradients(xi)
            jacobian = coordinates.T @ grads
            det = np.linalg.det(jacobian)
            if det <= 0:
                raise ContractViolationError(f"element has non-positive Jacobian ({det})")
            matrices[g] = _b_matrix(grads @ np.linalg.inv(jacobian))
            weights[g] = det
        return cls(matrices=matrices, weights=weights)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Structured hexahedral mesh of a cube"""
    side: float
    n_edge: int
    nodes: np.ndarray
    elements: np.ndarray
    b: BOperator

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_points(self) -> int:
        return POINTS_PER_ELEMENT * self.n_elements

    @property
    def n_dofs(self) -> int:
        return 3 * self.n_nodes

    @cached_property
    def element_dofs(self) -> np.ndarray:
        """(n_elements, 24) global dof ids"""
        return (3 * self.elements[:, :, None] + np.arange(3)[None, None, :]).reshape(self.n_elements, -1)

    @cached_property
    def ip_weights(self) -> np.ndarray:
        """Integration weights w_e, element-major (point id = 8 * element + gauss index)"""
        return np.tile(self.b.weights, self.n_elements)

    @cached_property
    def gauss_coordinates(self) -> np.ndarray:
        shape = 0.125 * np.prod(1.0 + _GAUSS_POINTS[:, None, :] * _NODE_SIGNS[None, :, :], axis=2)
        return np.einsum("ga,eac->egc", shape, self.nodes[self.elements]).reshape(-1, 3)

    def strain(self, u: np.ndarray) -> np.ndarray:
        """B u at every integration point, shape (m, 6)"""
        u_e = np.asarray(u)[self.element_dofs]
        return np.einsum("gij,ej->egi", self.b.matrices, u_e).reshape(-1, VOIGT_SIZE)

    def scatter(self, values: np.ndarray) -> np.ndarray:
        """Assembled sum of w B^T v over integration points, as a global dof vector"""
        values = np.asarray(values, dtype=np.float64).reshape(self.n_elements, POINTS_PER_ELEMENT, VOIGT_SIZE)
        weighted = values * self.b.weights[None, :, None]
        local = np.einsum("gij,egi->ej", self.b.matrices, weighted)
        return np.bincount(self.element_dofs.ravel(), weights=local.ravel(), minlength=self.n_dofs)


def build_mesh(side: float = 10.0, n_edge: int = 20) -> Mesh:
    """Regular n_edge^3 grid of trilinear hexahedra"""
    if n_edge < 1:
        raise ContractViolationError(f"n_edge must be >= 1, got {n_edge}")
    if side <= 0:
        raise ContractViolationError(f"side length must be > 0, got {side}")
    h = side / n_edge
    n1 = n_edge + 1
    kk, jj, ii = np.meshgrid(np.arange(n1), np.arange(n1), np.arange(n1), indexing="ij")
    nodes = np.column_stack([
        -0.5 * side + h * ii.ravel(),
        -0.5 * side + h * jj.ravel(),
        h * kk.ravel(),
    ])
    r = np.arange(n_edge)
    ke, je, ie = (a.ravel() for a in np.meshgrid(r, r, r, indexing="ij"))
    offsets = ((_NODE_SIGNS + 1.0) / 2.0).astype(np.int64)
    elements = np.column_stack([
        (ie + di) + n1 * ((je + dj) + n1 * (ke + dk)) for di, dj, dk in offsets
    ])
    b = BOperator.for_element(nodes[elements[0]])
    mesh = Mesh(side=float(side), n_edge=int(n_edge), nodes=nodes, elements=elements, b=b)
    logger.debug("mesh: %d elements, %d nodes, %d integration points", mesh.n_elements, mesh.n_nodes, mesh.n_points)
    return mesh


@dataclass(frozen=True, eq=False)
class BoundaryConditions:
    """Fixed (zero) dofs, prescribed dofs with values, and the remaining free dofs"""
    n_dofs: int
    fixed: np.ndarray
    prescribed: np.ndarray
    values: np.ndarray
    free: np.ndarray

    @classmethod
    def from_dirichlet(cls, n_dofs: int, fixed, prescribed=(), values=()) -> "BoundaryConditions":
        fixed = np.unique(np.asarray(fixed, dtype=np.int64))
        prescribed = np.asarray(prescribed, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if prescribed.shape != values.shape:
            raise ContractViolationError("one value per prescribed dof is required")
        order = np.argsort(prescribed)
        prescribed, values = prescribed[order], values[order]
        if np.intersect1d(fixed, prescribed).size or np.unique(prescribed).size != prescribed.size:
            raise ContractViolationError("fixed and prescribed dof sets must be disjoint and unique")
        constrained = np.concatenate([fixed, prescribed])
        if constrained.size and (constrained.min() < 0 or constrained.max() >= n_dofs):
            raise ContractViolationError("constrained dof id out of range")
        free = np.setdiff1d(np.arange(n_dofs), constrained)
        return cls(n_dofs=n_dofs, fixed=fixed, prescribed=prescribed, values=values, free=free)

    @cached_property
    def dirichlet(self) -> np.ndarray:
        return np.concatenate([self.fixed, self.prescribed])

    @cached_property
    def dirichlet_values(self) -> np.ndarray:
        return np.concatenate([np.zeros(self.fixed.size), self.values])


def twist_bcs(mesh: Mesh, theta: float) -> BoundaryConditions:
    """Bottom face clamped; top face rotated by theta degrees about the z-axis with u_z = 0"""
    z = mesh.nodes[:, 2]
    bottom = np.flatnonzero(np.isclose(z, 0.0))
    top = np.flatnonzero(np.isclose(z, mesh.side))
    angle = np.deg2rad(theta)
    x, y = mesh.nodes[top, 0], mesh.nodes[top, 1]
    ux = x * np.cos(angle) - y * np.sin(angle) - x
    uy = x * np.sin(angle) + y * np.cos(angle) - y
    fixed = (3 * bottom[:, None] + np.arange(3)).ravel()
    prescribed = (3 * top[:, None] + np.arange(3)).ravel()
    values = np.column_stack([ux, uy, np.zeros_like(ux)]).ravel()
    return BoundaryConditions.from_dirichlet(mesh.n_dofs, fixed, prescribed, values)


def _assemble(mesh: Mesh, element_matrices: np.ndarray) -> sp.csr_matrix:
    """Sum element matrices (shared (24, 24) or per element (n_el, 24, 24)) into a CSR matrix"""
    dofs = mesh.element_dofs
    rows = np.repeat(dofs, DOFS_PER_ELEMENT, axis=1).ravel()
    cols = np.tile(dofs, (1, DOFS_PER_ELEMENT)).ravel()
    if element_matrices.ndim == 2:
        data = np.tile(element_matrices.ravel(), mesh.n_elements)
    else:
        data = element_matrices.reshape(mesh.n_elements, -1).ravel()
    return sp.coo_matrix((data, (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs)).tocsr()


def _factorize(matrix: sp.csr_matrix):
    """Symmetric-mode sparse LU; all pivots positive for an SPD matrix"""
    if matrix.shape[0] == 0:
        return None
    try:
        lu = spla.splu(
            matrix.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as exc:
        raise SingularSystemError(f"stiffness factorization failed: {exc}") from exc
    pivots = lu.U.diagonal()
    if not np.all(np.isfinite(pivots)) or np.any(pivots <= 0):
        raise SingularSystemError(f"stiffness matrix is not positive definite (min pivot {pivots.min():.3e})")
    return lu


@dataclass(frozen=True, eq=False)
class SystemMatrices:
    """Reduced stiffness K on free dofs, its coupling to Dirichlet dofs, and the reusable factorization"""
    stiffness: sp.csr_matrix
    k_free: sp.csr_matrix
    k_coupling: sp.csr_matrix
    factor: Optional[object]
    bcs: BoundaryConditions
    metric: MetricC
    t_assembly_s: float = 0.0

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve K x = rhs on the free dofs with a residual check"""
        if rhs.size == 0:
            return np.zeros(0)
        x = self.factor.solve(rhs)
        residual = np.linalg.norm(self.k_free @ x - rhs)
        limit = SOLVE_RTOL * np.linalg.norm(rhs)
        if residual > limit:
            # one step of iterative refinement before giving up
            x = x + self.factor.solve(rhs - self.k_free @ x)
            residual = np.linalg.norm(self.k_free @ x - rhs)
            if residual > limit:
                raise ConvergenceError(f"linear solve residual {residual:.3e} exceeds {limit:.3e}")
        return x


def element_stiffness(mesh: Mesh, metric: MetricC) -> np.ndarray:
    """sum_g w_g B_g^T C B_g for one element"""
    return np.einsum("g,gki,kl,glj->ij", mesh.b.weights, mesh.b.matrices, metric.matrix, mesh.b.matrices)


def assemble_K(mesh: Mesh, metric: MetricC, bcs: BoundaryConditions) -> SystemMatrices:
    """Assemble K = A_e{w B^T C B}, reduce by the boundary conditions and factorize once"""
    start = time.perf_counter()
    ke = element_stiffness(mesh, metric)
    stiffness = _assemble(mesh, ke)
    k_free = stiffness[bcs.free][:, bcs.free].tocsr()
    k_coupling = stiffness[bcs.free][:, bcs.dirichlet].tocsr()
    factor = _factorize(k_free)
    elapsed = time.perf_counter() - start
    logger.info("assembled and factorized K: %d free dofs in %.3f s", bcs.free.size, elapsed)
    return SystemMatrices(
        stiffness=stiffness, k_free=k_free, k_coupling=k_coupling, factor=factor,
        bcs=bcs, metric=metric, t_assembly_s=elapsed,
    )


@dataclass
class ConstraintProjection:
    """Result of P_C: displacements u, multipliers eta and the new (m, 12) states"""
    u: np.ndarray
    eta: np.ndarray
    states: np.ndarray
    t_rhs_s: float = 0.0
    t_solve_s: float = 0.0
    residuals: dict = field(default_factory=dict)


def project_constraint(
    sys: SystemMatrices,
    mesh: Mesh,
    bcs: BoundaryConditions,
    metric: MetricC,
    assigned: np.ndarray,
    f: Optional[np.ndarray] = None,
) -> ConstraintProjection:
    """
    Closest compatible and equilibrated state to the assigned data states.

    K u = E with E = A_e{w B^T C eps*}, K eta = S with S = f - A_e{w B^T sig*};
    eps = B u, sig = sig* + C B eta. Both solves reuse sys.factor.
    """
    if bcs is not sys.bcs or not metric.same_as(sys.metric):
        raise ContractViolationError("boundary conditions and metric must be the ones K was assembled with")
    assigned = np.asarray(assigned, dtype=np.float64)
    if assigned.shape != (mesh.n_points, PHASE_SIZE):
        raise ContractViolationError(
            f"need one assigned state per integration point: expected {(mesh.n_points, PHASE_SIZE)}, got {assigned.shape}"
        )
    forces = np.zeros(mesh.n_dofs) if f is None else np.asarray(f, dtype=np.float64)
    eps_star = assigned[:, :VOIGT_SIZE]
    sig_star = assigned[:, VOIGT_SIZE:]
    c = metric.matrix

    start = time.perf_counter()
    rhs_e = mesh.scatter(eps_star @ c)
    rhs_s = forces - mesh.scatter(sig_star)
    rhs_u = rhs_e[bcs.free] - sys.k_coupling @ bcs.dirichlet_values
    rhs_eta = rhs_s[bcs.free]
    t_rhs = time.perf_counter() - start

    start = time.perf_counter()
    u = np.zeros(mesh.n_dofs)
    u[bcs.dirichlet] = bcs.dirichlet_values
    u[bcs.free] = sys.solve(rhs_u)
    eta = np.zeros(mesh.n_dofs)
    eta[bcs.free] = sys.solve(rhs_eta)
    t_solve = time.perf_counter() - start

    strain = mesh.strain(u)
    stress = sig_star + mesh.strain(eta) @ c
    return ConstraintProjection(
        u=u, eta=eta, states=np.hstack([strain, stress]), t_rhs_s=t_rhs, t_solve_s=t_solve,
    )


def reference_solution(
    mesh: Mesh,
    bcs: BoundaryConditions,
    p: MaterialParams,
    f: Optional[np.ndarray] = None,
    rtol: float = NEWTON_RTOL,
    max_steps: int = NEWTON_MAX_STEPS,
) -> np.ndarray:
    """Newton-Raphson solution of the model-based problem; returns the global displacement vector"""
    forces = np.zeros(mesh.n_dofs) if f is None else np.asarray(f, dtype=np.float64)
    u = np.zeros(mesh.n_dofs)
    u[bcs.dirichlet] = bcs.dirichlet_values
    reference = None
    for step in range(max_steps + 1):
        strain = mesh.strain(u)
        residual = (mesh.scatter(eval_material_batch(strain, p)) - forces)[bcs.free]
        norm = float(np.linalg.norm(residual))
        if reference is None:
            reference = norm
        logger.debug("Newton step %d: residual %.3e", step, norm)
        if norm <= rtol * reference:
            logger.info("reference solution converged in %d Newton steps", step)
            return u
        if step == max_steps:
            break
        tangents = material_tangent(strain, p).reshape(mesh.n_elements, POINTS_PER_ELEMENT, VOIGT_SIZE, VOIGT_SIZE)
        k_elements = np.einsum("g,gki,egkl,glj->eij", mesh.b.weights, mesh.b.matrices, tangents, mesh.b.matrices)
        k_tangent = _assemble(mesh, k_elements)[bcs.free][:, bcs.free].tocsc()
        u[bcs.free] += spla.spsolve(k_tangent, -residual)
    raise ConvergenceError(f"Newton iteration did not converge in {max_steps} steps (residual {norm:.3e})")


def export_nodes_csv(mesh: Mesh, u: np.ndarray, path) -> Path:
    """Nodal coordinates and displacements"""
    disp = np.asarray(u).reshape(-1, 3)
    frame = pd.DataFrame(np.hstack([mesh.nodes, disp]), columns=["x", "y", "z", "ux", "uy", "uz"])
    frame.insert(0, "node_id", np.arange(mesh.n_nodes))
    frame.to_csv(path, index=False, float_format="%.17g")
    return Path(path)


def export_points_csv(mesh: Mesh, states: np.ndarray, path) -> Path:
    """Per-integration-point coordinates with strain and stress"""
    frame = pd.DataFrame(np.asarray(states), columns=list(STRAIN_LABELS + STRESS_LABELS))
    for axis, name in enumerate(("x", "y", "z")):
        frame.insert(axis, name, mesh.gauss_coordinates[:, axis])
    frame.insert(0, "point_id", np.arange(mesh.n_points))
    frame.to_csv(path, index=False, float_format="%.17g")
    return Path(path)
