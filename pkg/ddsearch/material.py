"""
Synthetic material model and data set sampling

sig = E (eps + alpha eps^3 + 0.5 (tr eps + alpha (tr eps)^3) I)

eps^3 is the matrix power of the symmetric strain tensor, which keeps the law
isotropic. The law derives from the energy
W = E (tr(eps^2)/2 + alpha tr(eps^4)/4 + (tr eps)^2/4 + alpha (tr eps)^4/8),
so its Voigt tangent is symmetric.
"""

import logging
from typing import Tuple

import numpy as np

from .errors import ContractViolationError
from .models import VOIGT_SIZE, MaterialDataset, MaterialParams, as_voigt

logger = logging.getLogger(__name__)

DEFAULT_BOUNDS = (-0.025, 0.025)
# Points per random substream; fixed so a seed maps to one data set regardless of workers
SAMPLE_CHUNK = 1 << 16

_UPPER = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
_TRACE_MASK = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])


def strain_to_tensor(strains: np.ndarray) -> np.ndarray:
    """(n, 6) engineering-shear Voigt strains to (n, 3, 3) tensors"""
    strains = np.asarray(strains, dtype=np.float64).reshape(-1, VOIGT_SIZE)
    tensors = np.zeros((strains.shape[0], 3, 3))
    for k, (i, j) in enumerate(_UPPER):
        value = strains[:, k] if i == j else 0.5 * strains[:, k]
        tensors[:, i, j] = value
        tensors[:, j, i] = value
    return tensors


def stress_to_voigt(tensors: np.ndarray) -> np.ndarray:
    """(n, 3, 3) stress tensors to (n, 6) Voigt vectors"""
    return np.stack([tensors[:, i, j] for i, j in _UPPER], axis=-1)


def eval_material_batch(strains: np.ndarray, p: MaterialParams) -> np.ndarray:
    """Stresses for an (n, 6) array of strains"""
    eps = strain_to_tensor(strains)
    eps3 = eps @ eps @ eps
    trace = np.trace(eps, axis1=1, axis2=2)
    volumetric = 0.5 * (trace + p.alpha * trace ** 3)
    sig = p.E * (eps + p.alpha * eps3 + volumetric[:, None, None] * np.eye(3))
    return stress_to_voigt(sig)


def eval_material(strain, p: MaterialParams) -> np.ndarray:
    """Stress Voigt vector for one strain Voigt vector"""
    return eval_material_batch(as_voigt(strain, "strain")[None, :], p)[0]


def material_tangent(strains: np.ndarray, p: MaterialParams) -> np.ndarray:
    """Consistent tangents d sig / d eps, shape (n, 6, 6)"""
    eps = strain_to_tensor(strains)
    eps2 = eps @ eps
    trace = np.trace(eps, axis1=1, axis2=2)
    directions = strain_to_tensor(np.eye(VOIGT_SIZE))
    cubic = (
        np.einsum("kab,nbc->nkac", directions, eps2)
        + np.einsum("nab,kbc,ncd->nkad", eps, directions, eps)
        + np.einsum("nab,kbc->nkac", eps2, directions)
    )
    volumetric = 0.5 * (1.0 + 3.0 * p.alpha * trace ** 2)[:, None] * _TRACE_MASK[None, :]
    d_sig = p.E * (
        directions[None, :, :, :]
        + p.alpha * cubic
        + volumetric[:, :, None, None] * np.eye(3)[None, None, :, :]
    )
    n = eps.shape[0]
    columns = stress_to_voigt(d_sig.reshape(n * VOIGT_SIZE, 3, 3)).reshape(n, VOIGT_SIZE, VOIGT_SIZE)
    return np.transpose(columns, (0, 2, 1))


def _validate_bounds(bounds: Tuple[float, float]) -> Tuple[float, float]:
    lo, hi = float(bounds[0]), float(bounds[1])
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
        raise ContractViolationError(f"strain bounds must be a finite interval, got {bounds}")
    return lo, hi


def sample_dataset(
    n: int,
    bounds: Tuple[float, float] = DEFAULT_BOUNDS,
    p: MaterialParams = MaterialParams(),
    seed: int = 0,
) -> MaterialDataset:
    """
    Draw n strains i.i.d. uniform per Voigt component and evaluate the material.

    Random numbers come from PCG64 substreams: SeedSequence(seed).spawn(c) with one
    child per SAMPLE_CHUNK points, so chunks can be generated independently.
    """
    if n < 1:
        raise ContractViolationError(f"data set size must be >= 1, got {n}")
    lo, hi = _validate_bounds(bounds)
    n_chunks = -(-n // SAMPLE_CHUNK)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    strains = np.empty((n, VOIGT_SIZE))
    for chunk, child in enumerate(children):
        start = chunk * SAMPLE_CHUNK
        stop = min(n, start + SAMPLE_CHUNK)
        rng = np.random.Generator(np.random.PCG64(child))
        # Generator.random draws 53-bit mantissa doubles in [0, 1)
        strains[start:stop] = lo + (hi - lo) * rng.random((stop - start, VOIGT_SIZE))
    stresses = eval_material_batch(strains, p)
    logger.debug("sampled %d material points (seed %d, bounds [%g, %g])", n, seed, lo, hi)
    return MaterialDataset(points=np.hstack([strains, stresses]), seed=seed, bounds=(lo, hi))
