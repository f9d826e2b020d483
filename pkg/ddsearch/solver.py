"""
DD fixed-point solver: z_{i+1} = P_D(P_C(z_i))

P_C is the constraint projection of fem.project_constraint (one factorization
of K per run); P_D is one nearest-neighbor query per integration point against
the bound data set. The recorded global distance of iteration i is
d^2(y_i, z_i), measured after P_D.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import ContractViolationError
from .fem import BoundaryConditions, Mesh, SystemMatrices, assemble_K, project_constraint
from .models import BackendKind, ConvergenceMode, IterationRecord, MaterialDataset, QueryParams, QueryResult, ScatterSnapshot
from .phase_space import MetricC, map_states
from .search.base import NnIndex, reuse_previous, should_skip
from .settings import SolverSettings

logger = logging.getLogger(__name__)

# (cfg, iteration, last global d^2) -> f_d
ScheduleRule = Callable[[SolverSettings, int, Optional[float]], float]


def schedule_fd(cfg: SolverSettings, i: int, last_global_d2: Optional[float] = None) -> float:
    """Linear ramp from fd_start at i = 1 to fd_final at i = ramp, constant afterwards"""
    if i < 1:
        raise ContractViolationError(f"iterations are counted from 1, got {i}")
    s = cfg.schedule
    if s.ramp == 1:
        return s.fd_final
    fraction = min(1.0, (i - 1) / (s.ramp - 1))
    return s.fd_start + (s.fd_final - s.fd_start) * fraction


@dataclass
class DdState:
    """Assignment state of a DD run and its per-iteration history"""
    assignments: np.ndarray
    y_states: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    previous_assignments: Optional[np.ndarray] = None
    records: List[IterationRecord] = field(default_factory=list)
    warm_start_history: List[np.ndarray] = field(default_factory=list)
    last_queries: Optional[np.ndarray] = None
    last_results: List[Optional[QueryResult]] = field(default_factory=list)
    local_d2: Optional[np.ndarray] = None
    scatter: Dict[int, ScatterSnapshot] = field(default_factory=dict)
    best_iteration: int = 0
    best_global_d2: float = np.inf
    best_y_states: Optional[np.ndarray] = None
    best_assignments: Optional[np.ndarray] = None
    best_u: Optional[np.ndarray] = None

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def warm_starts(self) -> np.ndarray:
        """Start ids the next P_D hands to warm-startable indices"""
        return self.assignments

    @property
    def global_d2_history(self) -> np.ndarray:
        return np.array([r.global_d2 for r in self.records])


def convergence_check(state: DdState, mode: ConvergenceMode, window: int = 3, rtol: float = 1e-10) -> bool:
    """Stop criterion evaluated after a completed iteration"""
    if not state.records:
        raise ContractViolationError("convergence needs at least one completed iteration")
    mode = ConvergenceMode(mode)
    if mode is ConvergenceMode.ASSIGNMENT:
        return state.previous_assignments is not None and bool(
            np.array_equal(state.assignments, state.previous_assignments)
        )
    if mode is ConvergenceMode.STAGNATION:
        history = state.global_d2_history
        if history.size <= window:
            return False
        reference = history[-window - 1]
        return bool(history[-window:].min() > reference - rtol * abs(reference))
    if mode is ConvergenceMode.AUTO:
        raise ContractViolationError("resolve the auto convergence mode before checking")
    return False


class DDSolver:
    """One DD run over a fixed mesh, data set and index"""

    def __init__(
        self,
        mesh: Mesh,
        bcs: BoundaryConditions,
        metric: MetricC,
        data: MaterialDataset,
        index: NnIndex,
        cfg: SolverSettings,
        forces: Optional[np.ndarray] = None,
        system: Optional[SystemMatrices] = None,
        schedule_rule: Optional[ScheduleRule] = None,
    ):
        if not index.data.same_points(data) or not index.metric.same_as(metric):
            raise ContractViolationError("index must be built over the data set with the same metric")
        if system is not None and (system.bcs is not bcs or not system.metric.same_as(metric)):
            raise ContractViolationError("system matrices were assembled for other boundary conditions or metric")
        self.mesh = mesh
        self.bcs = bcs
        self.metric = metric
        self.data = data
        self.index = index
        self.cfg = cfg
        self.forces = forces
        self.system = system
        self.schedule_rule = schedule_rule or schedule_fd
        self.mode = cfg.convergence
        if self.mode is ConvergenceMode.AUTO:
            self.mode = ConvergenceMode.ASSIGNMENT if cfg.exact else ConvergenceMode.STAGNATION
        self.skip_allowed = cfg.skip.enabled
        if self.skip_allowed and cfg.skip.allow_heuristic and index.kind is BackendKind.GRAPH:
            logger.warning("δ skips enabled on graph runner-up distances; skipped answers are heuristic")

    def initial_state(self, initial_assignments: Optional[np.ndarray] = None) -> DdState:
        m = self.mesh.n_points
        if initial_assignments is None:
            rng = np.random.Generator(np.random.PCG64(self.cfg.seed))
            assignments = rng.integers(self.data.n_points, size=m)
        else:
            assignments = np.array(initial_assignments, dtype=np.int64).reshape(-1)
            if assignments.shape != (m,):
                raise ContractViolationError(f"need {m} initial assignments, got {assignments.size}")
            if assignments.min() < 0 or assignments.max() >= self.data.n_points:
                raise ContractViolationError("initial assignments outside the data set")
        return DdState(assignments=assignments.astype(np.int64), last_results=[None] * m)

    def _query_params(self, f_d: float, warm_start: int) -> QueryParams:
        backend = self.cfg.backend
        return QueryParams(
            f_d=f_d,
            f_s=backend.f_s,
            warm_start=int(warm_start),
            skip_delta=self.cfg.skip.max_delta,
            restarts=backend.restarts,
            track_second=self.skip_allowed,
        )

    def _answer(self, e: int, q: np.ndarray, f_d: float, state: DdState) -> QueryResult:
        previous = state.last_results[e]
        skip = self.cfg.skip
        params = self._query_params(f_d, state.warm_starts[e])
        if (
            self.skip_allowed
            and previous is not None
            and (previous.second_exact or skip.allow_heuristic)
            and should_skip(previous, state.last_queries[e], q, params.skip_delta, skip.delta_as_printed)
        ):
            return reuse_previous(previous, self.index.points, state.last_queries[e], q)
        return self.index.query(q, params)

    def project_data(self, queries: np.ndarray, f_d: float, state: DdState) -> List[QueryResult]:
        """P_D: one query per integration point, optionally spread over threads"""
        m = queries.shape[0]
        results: List[Optional[QueryResult]] = [None] * m

        def run(bounds: Tuple[int, int]) -> None:
            for e in range(*bounds):
                results[e] = self._answer(e, queries[e], f_d, state)

        threads = min(self.cfg.threads, m)
        if threads <= 1:
            run((0, m))
        else:
            edges = np.linspace(0, m, threads + 1).astype(int)
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(run, zip(edges[:-1], edges[1:])))
        return results

    def step(self, state: DdState) -> IterationRecord:
        """One iteration: P_C on the current assignments, then P_D"""
        i = state.iterations + 1
        t_assembly = 0.0
        if self.system is None:
            self.system = assemble_K(self.mesh, self.metric, self.bcs)
            t_assembly = self.system.t_assembly_s
        last_d2 = state.records[-1].global_d2 if state.records else None
        f_d = float(self.schedule_rule(self.cfg, i, last_d2))

        z_states = self.data.points[state.assignments]
        projection = project_constraint(self.system, self.mesh, self.bcs, self.metric, z_states, self.forces)
        queries = map_states(projection.states, self.metric)

        start = time.perf_counter()
        state.warm_start_history.append(state.assignments.copy())
        results = self.project_data(queries, f_d, state)
        t_query = time.perf_counter() - start

        state.previous_assignments = state.assignments
        state.assignments = np.fromiter((r.best_id for r in results), dtype=np.int64, count=len(results))
        state.y_states = projection.states
        state.u = projection.u
        state.last_queries = queries
        state.last_results = results
        state.local_d2 = np.array([r.best_dist_sq for r in results])
        comparisons = np.fromiter((r.comparisons for r in results), dtype=np.int64, count=len(results))
        global_d2 = float(0.5 * self.mesh.ip_weights @ state.local_d2)

        record = IterationRecord(
            iteration=i,
            global_d2=global_d2,
            f_d=f_d,
            t_assembly_s=t_assembly,
            t_rhs_s=projection.t_rhs_s,
            t_solve_s=projection.t_solve_s,
            t_query_s=t_query,
            comparisons=int(comparisons.sum()),
            hops=int(sum(r.hops for r in results)),
            skips=int(sum(r.skipped for r in results)),
        )
        state.records.append(record)
        if global_d2 < state.best_global_d2:
            state.best_iteration = i
            state.best_global_d2 = global_d2
            state.best_y_states = projection.states
            state.best_assignments = state.assignments
            state.best_u = projection.u
        if i in self.cfg.scatter_iterations:
            state.scatter[i] = ScatterSnapshot(iteration=i, final_de2=state.local_d2.copy(), comparisons=comparisons)
        logger.info(
            "iteration %d: global d2 %.6e, f_d %.2f, %d comparisons, %d hops, %d skips",
            i, global_d2, f_d, record.comparisons, record.hops, record.skips,
        )
        return record

    def run(self, initial_assignments: Optional[np.ndarray] = None) -> Tuple[DdState, bool]:
        state = self.initial_state(initial_assignments)
        converged = False
        for _ in range(self.cfg.max_iterations):
            self.step(state)
            if convergence_check(state, self.mode, self.cfg.stagnation_window, self.cfg.stagnation_rtol):
                converged = True
                break
        if converged:
            logger.info("DD run converged (%s) after %d iterations", self.mode.value, state.iterations)
        elif self.mode is ConvergenceMode.MAX_ITER:
            logger.info("DD run finished its %d iterations", state.iterations)
        else:
            logger.warning("DD run stopped at max_iterations=%d without convergence", self.cfg.max_iterations)
        return state, converged


def dd_solve(
    mesh: Mesh,
    bcs: BoundaryConditions,
    metric: MetricC,
    data: MaterialDataset,
    index: NnIndex,
    cfg: SolverSettings,
    forces: Optional[np.ndarray] = None,
    initial_assignments: Optional[np.ndarray] = None,
    system: Optional[SystemMatrices] = None,
    schedule_rule: Optional[ScheduleRule] = None,
) -> Tuple[DdState, bool]:
    """Run the DD iteration until convergence or cfg.max_iterations"""
    solver = DDSolver(mesh, bcs, metric, data, index, cfg, forces, system, schedule_rule)
    return solver.run(initial_assignments)
