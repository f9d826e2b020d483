"""
Phase-space metric, distances and the isometric coordinate mapping

The metric C (6x6, SPD) weighs strain differences and C^-1 weighs stress
differences. With C = L L^T the map (L^T eps || L^-1 sig) turns that distance
into the plain Euclidean one, so every search index works on mapped coordinates.
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import scipy.linalg

from .errors import ContractViolationError, MetricConstructionError
from .models import PHASE_SIZE, VOIGT_SIZE, MaterialDataset, PhaseState

logger = logging.getLogger(__name__)

SYMMETRY_RTOL = 1e-12
FACTOR_RTOL = 1e-10
MAX_CONDITION = 1e12
DEFAULT_FALLBACK_SCALE = 1000.0


def sym(matrix: np.ndarray) -> np.ndarray:
    """Symmetric part (M + M^T) / 2, exactly symmetric in floating point"""
    matrix = np.asarray(matrix, dtype=np.float64)
    return (matrix + matrix.T) / 2.0


@dataclass(frozen=True, eq=False)
class MetricC:
    """SPD metric with its Cholesky factor L (C = L L^T) and L^-1"""
    matrix: np.ndarray
    factor: np.ndarray
    inverse_factor: np.ndarray

    @classmethod
    def from_matrix(cls, matrix) -> "MetricC":
        """Validate symmetry and positive definiteness, then factorize"""
        c = np.array(matrix, dtype=np.float64)
        if c.shape != (VOIGT_SIZE, VOIGT_SIZE):
            raise MetricConstructionError(f"metric must be {VOIGT_SIZE}x{VOIGT_SIZE}, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise MetricConstructionError("metric has non-finite entries")
        scale = np.linalg.norm(c)
        if scale == 0.0:
            raise MetricConstructionError("metric is the zero matrix")
        asym = np.linalg.norm(c - c.T)
        if asym > SYMMETRY_RTOL * scale:
            raise MetricConstructionError(f"metric is not symmetric (relative asymmetry {asym / scale:.3e})")
        c = sym(c)
        try:
            lower = scipy.linalg.cholesky(c, lower=True)
        except np.linalg.LinAlgError as exc:
            raise MetricConstructionError(f"metric is not positive definite: {exc}") from exc
        if np.any(np.diag(lower) <= 0):
            raise MetricConstructionError("metric has a non-positive Cholesky pivot")
        if np.linalg.norm(lower @ lower.T - c) > FACTOR_RTOL * scale:
            raise MetricConstructionError("Cholesky factor does not reproduce the metric")
        inverse = scipy.linalg.solve_triangular(lower, np.eye(VOIGT_SIZE), lower=True)
        for array in (c, lower, inverse):
            array.setflags(write=False)
        return cls(matrix=c, factor=lower, inverse_factor=inverse)

    @classmethod
    def scaled_identity(cls, scale: float = DEFAULT_FALLBACK_SCALE) -> "MetricC":
        return cls.from_matrix(scale * np.eye(VOIGT_SIZE))

    def inverse_apply(self, stress: np.ndarray) -> np.ndarray:
        """C^-1 applied to a stress-like vector"""
        return scipy.linalg.cho_solve((self.factor, True), stress)

    def same_as(self, other: "MetricC") -> bool:
        return bool(np.array_equal(self.matrix, other.matrix))


def local_distance_sq(a: PhaseState, b: PhaseState, c: MetricC) -> float:
    """d_e^2 = C(de).(de) + C^-1(ds).(ds), evaluated directly"""
    d_strain = a.strain - b.strain
    d_stress = a.stress - b.stress
    value = d_strain @ c.matrix @ d_strain + d_stress @ c.inverse_apply(d_stress)
    return max(float(value), 0.0)


def map_point(s: PhaseState, c: MetricC) -> np.ndarray:
    """Mapped 12-d coordinates (L^T eps || L^-1 sig)"""
    return np.concatenate([c.factor.T @ s.strain, c.inverse_factor @ s.stress])


def map_states(states: np.ndarray, c: MetricC) -> np.ndarray:
    """Row-wise map_point for an (n, 12) array of (strain || stress) rows"""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[1] != PHASE_SIZE:
        raise ContractViolationError(f"states must have shape (n, {PHASE_SIZE}), got {states.shape}")
    return np.hstack([states[:, :VOIGT_SIZE] @ c.factor, states[:, VOIGT_SIZE:] @ c.inverse_factor.T])


def bind_metric(data: MaterialDataset, c: MetricC) -> MaterialDataset:
    """Return a copy of the data set carrying its mapped coordinates"""
    return data.with_binding(map_states(data.points, c), c)


def global_distance_sq(
    assignments: Sequence[Tuple[PhaseState, PhaseState]],
    weights: Sequence[float],
    metrics: Sequence[MetricC],
) -> float:
    """Sum over integration points of 1/2 w_e d_e^2"""
    if not (len(assignments) == len(weights) == len(metrics)):
        raise ContractViolationError(
            f"length mismatch: {len(assignments)} pairs, {len(weights)} weights, {len(metrics)} metrics"
        )
    total = 0.0
    for (y, z), w, c in zip(assignments, weights, metrics):
        if w <= 0:
            raise ContractViolationError(f"integration weights must be > 0, got {w}")
        total += 0.5 * w * local_distance_sq(y, z, c)
    return total


def local_distances_sq(y: np.ndarray, z: np.ndarray, c: MetricC) -> np.ndarray:
    """d_e^2 for matching rows of two (m, 12) state arrays, via the mapping"""
    diff = map_states(np.asarray(y) - np.asarray(z), c)
    return np.einsum("ij,ij->i", diff, diff)


def weighted_distance_sq(y: np.ndarray, z: np.ndarray, weights: np.ndarray, c: MetricC) -> float:
    """Vectorized global distance for one shared metric"""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != np.asarray(y).shape[0]:
        raise ContractViolationError("one weight per integration point is required")
    return float(0.5 * weights @ local_distances_sq(y, z, c))


def pca_metric(data: MaterialDataset) -> MetricC:
    """
    Metric from the principal subspace of the data.

    The first six principal components of the centered 12-d data form A (12x6).
    With A_eps the strain rows and A_sig the stress rows, the metric is
    sym(A_sig A_eps^-1). That product does not depend on the basis chosen for
    the subspace, and equals D for data on a linear law sig = D eps. The often
    quoted order A_eps^-1 A_sig is reversed here on purpose: it only recovers D
    when the principal basis commutes with D.
    """
    points = data.points
    n = points.shape[0]
    if n < PHASE_SIZE:
        raise MetricConstructionError(f"PCA metric needs at least {PHASE_SIZE} points, got {n}")
    centered = points - points.mean(axis=0)
    covariance = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(sym(covariance))
    order = np.argsort(eigvals)[::-1][:VOIGT_SIZE]
    components = eigvecs[:, order]
    # sign convention: largest-magnitude entry of each component positive
    pivots = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[pivots, np.arange(VOIGT_SIZE)])
    components = components * np.where(signs == 0, 1.0, signs)

    a_strain = components[:VOIGT_SIZE]
    a_stress = components[VOIGT_SIZE:]
    condition = np.linalg.cond(a_strain)
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        raise MetricConstructionError(f"strain block of the principal basis is singular (cond {condition:.3e})")
    product = np.linalg.solve(a_strain.T, a_stress.T).T
    try:
        return MetricC.from_matrix(sym(product))
    except MetricConstructionError as exc:
        raise MetricConstructionError(f"PCA metric is not SPD: {exc}") from exc


def metric_or_fallback(data: MaterialDataset, fallback_scale: float = DEFAULT_FALLBACK_SCALE) -> MetricC:
    """PCA metric, or fallback_scale * I when PCA construction fails"""
    try:
        metric = pca_metric(data)
    except MetricConstructionError as exc:
        logger.warning("PCA metric rejected (%s); using %.1f * I", exc, fallback_scale)
        return MetricC.scaled_identity(fallback_scale)
    logger.debug("PCA metric diagonal: %s", np.round(np.diag(metric.matrix), 3))
    return metric
