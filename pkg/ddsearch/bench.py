"""
Experiment runner and result files

A run writes run_<id>.csv (one row per iteration) and scatter_<id>_iter<k>.csv
files; an experiment writes one run per grid entry plus summary.csv (the run
manifest) and aggregate.csv (per-group means by iteration).
"""

import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from .dataset_io import load_dataset
from .errors import BenchError, DDSearchError
from .fem import (
    BoundaryConditions,
    Mesh,
    build_mesh,
    export_nodes_csv,
    export_points_csv,
    reference_solution,
    twist_bcs,
)
from .material import sample_dataset
from .models import (
    RUN_CSV_COLUMNS,
    VOIGT_SIZE,
    BackendKind,
    MaterialDataset,
    MaterialParams,
    QueryResult,
    ScatterSnapshot,
)
from .phase_space import MetricC, bind_metric, metric_or_fallback
from .search import NnIndex, build_index, linear_query, load_index
from .settings import BackendSettings, ExperimentSpec, RunSettings, _merge
from .solver import DdState, dd_solve

logger = logging.getLogger(__name__)

RECALL_RTOL = 1e-12
SCATTER_COLUMNS = ["point_id", "final_de2", "comparisons"]


@dataclass
class RunContext:
    """Everything a DD run needs besides its solver settings"""
    mesh: Mesh
    bcs: BoundaryConditions
    data: MaterialDataset
    metric: MetricC
    index: NnIndex


@dataclass
class RunOutcome:
    run_id: str
    state: Optional[DdState]
    converged: bool
    summary: Dict[str, Any]
    files: List[Path] = field(default_factory=list)


def load_or_sample(settings: RunSettings) -> MaterialDataset:
    if settings.data.path:
        return load_dataset(settings.data.path)
    return sample_dataset(
        settings.data.n_points, settings.data.bounds, settings.material.to_params(), settings.data.seed,
    )


def choose_metric(data: MaterialDataset, settings: RunSettings) -> MetricC:
    if settings.metric.kind == "identity":
        return MetricC.scaled_identity(settings.metric.fallback_scale)
    return metric_or_fallback(data, settings.metric.fallback_scale)


def prepare_run(settings: RunSettings, data: Optional[MaterialDataset] = None) -> RunContext:
    """Mesh, twist boundary conditions, bound data set and index for one run"""
    mesh = build_mesh(settings.mesh.side, settings.mesh.n_edge)
    bcs = twist_bcs(mesh, settings.mesh.theta)
    if data is None or not data.is_bound:
        raw = data if data is not None else load_or_sample(settings)
        data = bind_metric(raw, choose_metric(raw, settings))
    backend = settings.solver.backend
    if backend.index_path:
        index = load_index(backend.index_path, data)
    else:
        index = build_index(data, backend.kind, **backend.index_kwargs())
    return RunContext(mesh=mesh, bcs=bcs, data=data, metric=data.metric, index=index)


def recall_at_1(points: np.ndarray, queries: np.ndarray, results: Sequence[QueryResult]) -> float:
    """Fraction of answers whose distance equals the exact nearest distance"""
    hits = 0
    for q, result in zip(queries, results):
        exact = linear_query(points, q).best_dist_sq
        hits += result.best_dist_sq <= exact * (1.0 + RECALL_RTOL) + np.finfo(float).tiny
    return hits / max(len(results), 1)


def comparison_correlation(snapshot: ScatterSnapshot) -> float:
    """Spearman rank correlation of final d_e^2 against comparisons"""
    if np.ptp(snapshot.final_de2) == 0 or np.ptp(snapshot.comparisons) == 0:
        return float("nan")
    return float(spearmanr(snapshot.final_de2, snapshot.comparisons)[0])


def strain_error(mesh: Mesh, strains: np.ndarray, reference: np.ndarray) -> float:
    """Weighted relative L2 distance of an integration-point strain field from the reference"""
    weights = mesh.ip_weights
    diff = np.asarray(strains) - reference
    gap = np.einsum("i,ij,ij->", weights, diff, diff)
    scale = np.einsum("i,ij,ij->", weights, reference, reference)
    return float(np.sqrt(gap / scale)) if scale > 0 else float(np.sqrt(gap))


def reference_comparison(context: RunContext, p: MaterialParams, state: DdState) -> Dict[str, float]:
    """Time the Newton reference solve and measure the DD strains against it"""
    started = time.perf_counter()
    u = reference_solution(context.mesh, context.bcs, p)
    elapsed = time.perf_counter() - started
    error = strain_error(context.mesh, state.best_y_states[:, :VOIGT_SIZE], context.mesh.strain(u))
    logger.info("reference solution in %.3f s, DD strain error %.3e", elapsed, error)
    return {"t_reference_s": elapsed, "reference_strain_error": error}


def write_run_csv(state: DdState, path: Path) -> Path:
    frame = pd.DataFrame([r.to_dict() for r in state.records], columns=list(RUN_CSV_COLUMNS))
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def write_scatter_csv(snapshot: ScatterSnapshot, path: Path) -> Path:
    frame = pd.DataFrame(list(snapshot.to_rows()), columns=SCATTER_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise BenchError(f"cannot create output directory {path}: {exc}") from exc
    return path


def run_single(
    settings: RunSettings,
    out_dir,
    run_id: Optional[str] = None,
    context: Optional[RunContext] = None,
    export: bool = False,
) -> RunOutcome:
    """One DD run with its result files"""
    out_dir = _ensure_dir(Path(out_dir))
    run_id = run_id or settings.run_id or "run"
    context = context or prepare_run(settings)
    state, converged = dd_solve(
        context.mesh, context.bcs, context.metric, context.data, context.index, settings.solver,
    )
    files = [write_run_csv(state, out_dir / f"run_{run_id}.csv")]
    for iteration, snapshot in sorted(state.scatter.items()):
        files.append(write_scatter_csv(snapshot, out_dir / f"scatter_{run_id}_iter{iteration}.csv"))
    if export:
        files.append(export_nodes_csv(context.mesh, state.best_u, out_dir / f"nodes_{run_id}.csv"))
        files.append(export_points_csv(context.mesh, state.best_y_states, out_dir / f"points_{run_id}.csv"))

    records = state.records
    backend = settings.solver.backend
    summary: Dict[str, Any] = {
        "run_id": run_id,
        "backend": backend.kind.value,
        "n_points": context.data.n_points,
        "data_seed": settings.data.seed,
        "solver_seed": settings.solver.seed,
        "fd_final": settings.solver.schedule.fd_final,
        "iterations": state.iterations,
        "converged": converged,
        "final_global_d2": records[-1].global_d2,
        "best_global_d2": state.best_global_d2,
        "total_comparisons": sum(r.comparisons for r in records),
        "total_hops": sum(r.hops for r in records),
        "total_skips": sum(r.skips for r in records),
        "recall_at_1": recall_at_1(context.index.points, state.last_queries, state.last_results),
        "build_time_s": context.index.build_time_s,
        "index_bytes": context.index.memory_bytes,
        "error": "",
    }
    for iteration, snapshot in sorted(state.scatter.items()):
        summary[f"spearman_iter{iteration}"] = comparison_correlation(snapshot)
    if settings.reference:
        summary.update(reference_comparison(context, settings.material.to_params(), state))
    logger.info("run %s: %d iterations, final d2 %.6e, recall@1 %.3f",
                run_id, state.iterations, summary["final_global_d2"], summary["recall_at_1"])
    return RunOutcome(run_id=run_id, state=state, converged=converged, summary=summary, files=files)


def _with(base: RunSettings, **sections: Dict[str, Any]) -> RunSettings:
    return RunSettings.model_validate(_merge(base.model_dump(), sections))


def expand_experiment(spec: ExperimentSpec) -> Iterator[Tuple[str, str, RunSettings]]:
    """(group, run_id, settings) for every run of the grid"""
    base = spec.base
    if spec.name == "refinement-study":
        variants = [("n{n}", {})]
    elif spec.name == "fd-sweep":
        backends = spec.backends or [BackendSettings(kind=BackendKind.KDTREE), BackendSettings(kind=BackendKind.KMEANS)]
        variants = [
            (f"{b.label}-fd{fd:g}-n{{n}}", {"solver": {"backend": b.model_dump(), "schedule": {"fd_final": fd}}})
            for b in backends for fd in spec.fd_values
        ]
    elif spec.name == "kmeans-sweep":
        variants = [
            (f"kmeans-k{k}-fd{fd:g}-n{{n}}",
             {"solver": {"backend": {"kind": BackendKind.KMEANS, "branching": k}, "schedule": {"fd_final": fd}}})
            for k in spec.branchings for fd in spec.fd_values
        ]
    elif spec.name == "graph-sweep":
        variants = [
            (f"graph-k{k}-fs{'inf' if fs is None else fs}-n{{n}}",
             {"solver": {"backend": {"kind": BackendKind.GRAPH, "graph_k": k, "f_s": fs}}})
            for k in spec.graph_ks for fs in spec.step_bounds
        ]
    else:
        backends = spec.backends or [BackendSettings(kind=kind) for kind in BackendKind]
        variants = [(f"{b.label}-n{{n}}", {"solver": {"backend": b.model_dump()}}) for b in backends]

    for template, update in variants:
        for n in spec.sizes:
            group = template.format(n=n)
            for seed in spec.seeds:
                sections = _merge(update, {"data": {"n_points": n, "seed": seed}})
                sections = _merge(sections, {"solver": {"seed": seed}})
                run_id = re.sub(r"[^A-Za-z0-9_.-]", "_", f"{group}-s{seed}")
                yield group, run_id, _with(base, **sections)


def run_experiment(spec: ExperimentSpec, out_dir=None) -> pd.DataFrame:
    """Run the whole grid; a failing run is recorded in the manifest and the grid continues"""
    out_dir = _ensure_dir(Path(out_dir or spec.out))
    datasets: Dict[Tuple[int, int], MaterialDataset] = {}
    rows = []
    for group, run_id, settings in expand_experiment(spec):
        key = (settings.data.n_points, settings.data.seed)
        try:
            data = datasets.get(key)
            context = prepare_run(settings, data)
            datasets[key] = context.data
            outcome = run_single(settings, out_dir, run_id, context)
            row = outcome.summary
        except DDSearchError as exc:
            logger.error("run %s failed: %s", run_id, exc)
            row = {"run_id": run_id, "backend": settings.solver.backend.kind.value,
                   "n_points": settings.data.n_points, "data_seed": settings.data.seed, "error": str(exc)}
        row.update({"experiment": spec.name, "group": group})
        rows.append(row)
    summary = pd.DataFrame(rows)
    summary.to_csv(out_dir / "summary.csv", index=False, float_format="%.17g")
    if (summary["error"] == "").any():
        aggregate_runs(out_dir)
    else:
        logger.warning("experiment %s: every run failed, no aggregate written", spec.name)
    logger.info("experiment %s: %d runs written to %s", spec.name, len(rows), out_dir)
    return summary


def aggregate_runs(out_dir) -> pd.DataFrame:
    """Per (group, iter) means over the successful runs listed in summary.csv"""
    out_dir = Path(out_dir)
    summary_path = out_dir / "summary.csv"
    if not summary_path.is_file():
        raise BenchError(f"no summary.csv in {out_dir}")
    summary = pd.read_csv(summary_path, keep_default_na=False)
    frames = []
    for row in summary.itertuples(index=False):
        if row.error:
            continue
        run = pd.read_csv(out_dir / f"run_{row.run_id}.csv")
        run.insert(0, "group", row.group)
        frames.append(run)
    if not frames:
        raise BenchError(f"no successful runs to aggregate in {out_dir}")
    runs = pd.concat(frames, ignore_index=True)
    grouped = runs.groupby(["group", "iter"], sort=True)
    aggregate = grouped.mean(numeric_only=True).reset_index()
    aggregate.insert(2, "n_runs", grouped.size().to_numpy())
    aggregate.to_csv(out_dir / "aggregate.csv", index=False, float_format="%.17g")
    return aggregate
