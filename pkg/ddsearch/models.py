"""
Data models for DD-Search
Phase-space states, material data sets, query parameters/results and solver records
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Optional, Tuple, TYPE_CHECKING

import numpy as np

from .errors import ContractViolationError, EmptyDatasetError, InvalidStateError

if TYPE_CHECKING:
    from .phase_space import MetricC


VOIGT_SIZE = 6
PHASE_SIZE = 2 * VOIGT_SIZE
# Strain uses engineering shear (g = 2 e_ij); stress components are plain
STRAIN_LABELS = ("e11", "e22", "e33", "g12", "g13", "g23")
STRESS_LABELS = ("s11", "s22", "s33", "s12", "s13", "s23")


def as_voigt(values: Any, name: str = "voigt vector") -> np.ndarray:
    """Validate and copy a 6-component Voigt vector (order 11, 22, 33, 12, 13, 23)"""
    vec = np.array(values, dtype=np.float64).reshape(-1)
    if vec.shape != (VOIGT_SIZE,):
        raise InvalidStateError(f"{name} needs {VOIGT_SIZE} components, got {vec.size}")
    if not np.all(np.isfinite(vec)):
        raise InvalidStateError(f"{name} has non-finite entries: {vec}")
    vec.setflags(write=False)
    return vec


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


class BackendKind(Enum):
    """Nearest-neighbor index structures"""
    LINEAR = "linear"
    KDTREE = "kdtree"
    KMEANS = "kmeans"
    GRAPH = "graph"


class ConvergenceMode(Enum):
    """How the DD solver decides to stop"""
    AUTO = "auto"
    ASSIGNMENT = "assignment-fixed-point"
    STAGNATION = "stagnation"
    MAX_ITER = "max-iter"


@dataclass(frozen=True, eq=False)
class PhaseState:
    """A (strain, stress) pair of the local phase space"""
    strain: np.ndarray
    stress: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "strain", as_voigt(self.strain, "strain"))
        object.__setattr__(self, "stress", as_voigt(self.stress, "stress"))

    @classmethod
    def from_vector(cls, vector: Any) -> "PhaseState":
        """Split a 12-component (strain || stress) vector"""
        vec = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vec.shape != (PHASE_SIZE,):
            raise InvalidStateError(f"phase state needs {PHASE_SIZE} components, got {vec.size}")
        return cls(strain=vec[:VOIGT_SIZE], stress=vec[VOIGT_SIZE:])

    @classmethod
    def zero(cls) -> "PhaseState":
        return cls(strain=np.zeros(VOIGT_SIZE), stress=np.zeros(VOIGT_SIZE))

    @property
    def vector(self) -> np.ndarray:
        """Concatenated 12-component vector"""
        return np.concatenate([self.strain, self.stress])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PhaseState):
            return NotImplemented
        return bool(np.array_equal(self.strain, other.strain) and np.array_equal(self.stress, other.stress))


@dataclass(frozen=True)
class MaterialParams:
    """Parameters of the synthetic nonlinear isotropic material"""
    E: float = 1000.0
    alpha: float = 500.0

    def __post_init__(self):
        if not np.isfinite(self.E) or self.E <= 0:
            raise ContractViolationError(f"material modulus E must be > 0, got {self.E}")
        if not np.isfinite(self.alpha):
            raise ContractViolationError(f"material alpha must be finite, got {self.alpha}")


@dataclass(frozen=True, eq=False)
class MaterialDataset:
    """
    N phase states stored row-wise as (strain || stress).

    `mapped` and `metric` are filled by phase_space.bind_metric; a bound data set
    is what every nearest-neighbor index searches.
    """
    points: np.ndarray
    seed: Optional[int] = None
    bounds: Tuple[float, float] = (-0.025, 0.025)
    mapped: Optional[np.ndarray] = None
    metric: Optional["MetricC"] = None

    def __post_init__(self):
        points = np.ascontiguousarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != PHASE_SIZE:
            raise ContractViolationError(f"data set points must have shape (N, {PHASE_SIZE}), got {points.shape}")
        if points.shape[0] == 0:
            raise EmptyDatasetError("material data set needs at least one point")
        if not np.all(np.isfinite(points)):
            raise InvalidStateError("material data set contains non-finite values")
        object.__setattr__(self, "points", _frozen(points))
        object.__setattr__(self, "bounds", (float(self.bounds[0]), float(self.bounds[1])))
        if self.mapped is not None:
            mapped = np.ascontiguousarray(self.mapped, dtype=np.float64)
            if mapped.shape != points.shape:
                raise ContractViolationError(
                    f"mapped coordinates shape {mapped.shape} does not match points {points.shape}"
                )
            object.__setattr__(self, "mapped", _frozen(mapped))

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def strains(self) -> np.ndarray:
        return self.points[:, :VOIGT_SIZE]

    @property
    def stresses(self) -> np.ndarray:
        return self.points[:, VOIGT_SIZE:]

    @property
    def is_bound(self) -> bool:
        return self.mapped is not None and self.metric is not None

    def state(self, index: int) -> PhaseState:
        """Phase state of data point `index`"""
        return PhaseState.from_vector(self.points[index])

    def with_binding(self, mapped: np.ndarray, metric: "MetricC") -> "MaterialDataset":
        return replace(self, mapped=mapped, metric=metric)

    def same_points(self, other: "MaterialDataset") -> bool:
        return self.points.shape == other.points.shape and bool(np.array_equal(self.points, other.points))


@dataclass(frozen=True)
class QueryParams:
    """Per-query accuracy controls shared by every index"""
    f_d: float = 1.0
    f_s: Optional[int] = None
    warm_start: Optional[int] = None
    # caps the moving-query threshold delta; 0 disables skipping
    skip_delta: Optional[float] = None
    restarts: int = 0
    # tree backends prune on the second-best distance so the runner-up is exact
    track_second: bool = False

    def __post_init__(self):
        if not 0.0 <= self.f_d <= 1.0:
            raise ContractViolationError(f"f_d must lie in [0, 1], got {self.f_d}")
        if self.f_s is not None and self.f_s < 1:
            raise ContractViolationError(f"f_s must be >= 1 when given, got {self.f_s}")
        if self.skip_delta is not None and self.skip_delta < 0:
            raise ContractViolationError(f"skip_delta must be >= 0, got {self.skip_delta}")
        if self.restarts < 0:
            raise ContractViolationError(f"restarts must be >= 0, got {self.restarts}")


@dataclass(frozen=True)
class QueryResult:
    """Outcome of one nearest-neighbor query"""
    best_id: int
    best_dist_sq: float
    second_dist_sq: Optional[float] = None
    comparisons: int = 0
    hops: int = 0
    skipped: bool = False
    # False when the runner-up may not be the true second-nearest point
    second_exact: bool = False


RUN_CSV_COLUMNS = (
    "iter", "global_d2", "t_assembly_s", "t_rhs_s", "t_solve_s", "t_query_s",
    "comparisons", "hops", "skips",
)


@dataclass
class IterationRecord:
    """Statistics of one DD solver iteration"""
    iteration: int
    global_d2: float
    f_d: float = 1.0
    t_assembly_s: float = 0.0
    t_rhs_s: float = 0.0
    t_solve_s: float = 0.0
    t_query_s: float = 0.0
    comparisons: int = 0
    hops: int = 0
    skips: int = 0

    def to_dict(self) -> Dict[str, Any]:
        """Row of the run CSV"""
        return {
            "iter": self.iteration,
            "global_d2": self.global_d2,
            "t_assembly_s": self.t_assembly_s,
            "t_rhs_s": self.t_rhs_s,
            "t_solve_s": self.t_solve_s,
            "t_query_s": self.t_query_s,
            "comparisons": self.comparisons,
            "hops": self.hops,
            "skips": self.skips,
        }

    def counters(self) -> Tuple[int, float, float, int, int, int]:
        """Hardware-independent part of the record"""
        return (self.iteration, self.global_d2, self.f_d, self.comparisons, self.hops, self.skips)


@dataclass
class ScatterSnapshot:
    """Per-integration-point query cost against final distance at one iteration"""
    iteration: int
    final_de2: np.ndarray
    comparisons: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def to_rows(self):
        for point_id, (de2, comps) in enumerate(zip(self.final_de2, self.comparisons)):
            yield {"point_id": point_id, "final_de2": float(de2), "comparisons": int(comps)}
