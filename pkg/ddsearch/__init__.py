"""
DD-Search: data-driven computational mechanics with exact and approximate
nearest-neighbor search
"""

from .errors import DDSearchError
from .fem import assemble_K, build_mesh, project_constraint, reference_solution, twist_bcs
from .material import eval_material, sample_dataset
from .models import MaterialDataset, MaterialParams, PhaseState, QueryParams, QueryResult
from .phase_space import MetricC, bind_metric, pca_metric
from .solver import DDSolver, dd_solve

__version__ = "0.1.0"

__all__ = [
    "DDSearchError", "MaterialDataset", "MaterialParams", "PhaseState", "QueryParams", "QueryResult",
    "MetricC", "bind_metric", "pca_metric", "eval_material", "sample_dataset",
    "build_mesh", "twist_bcs", "assemble_K", "project_constraint", "reference_solution",
    "DDSolver", "dd_solve",
]
