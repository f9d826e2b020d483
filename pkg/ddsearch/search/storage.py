"""
Index files: versioned .npz archives of little-endian structure arrays

The archive carries a JSON metadata entry (kind, version, build parameters,
data set fingerprint). An index is always reloaded against the bound data set
it was built from; a fingerprint mismatch is an IndexFormatError.
"""

import hashlib
import json
import logging
import zipfile
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import IndexFormatError
from ..models import BackendKind, MaterialDataset
from .base import LinearIndex, NnIndex
from .kdtree import KdTreeIndex
from .kmeans_tree import KMeansTreeIndex
from .knn_graph import KnnGraph

logger = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1


def dataset_fingerprint(data: MaterialDataset) -> str:
    """sha256 over the points and the bound metric"""
    digest = hashlib.sha256(np.ascontiguousarray(data.points, dtype="<f8").tobytes())
    if data.metric is not None:
        digest.update(np.ascontiguousarray(data.metric.matrix, dtype="<f8").tobytes())
    return digest.hexdigest()


def save_index(index: NnIndex, path: Union[str, Path]) -> Path:
    path = Path(path)
    meta = {
        "kind": index.kind.value,
        "version": INDEX_FORMAT_VERSION,
        "n_points": index.n_points,
        "fingerprint": dataset_fingerprint(index.data),
        "build_time_s": index.build_time_s,
        "params": index.params(),
    }
    arrays = {name: np.asarray(a).astype(a.dtype.newbyteorder("<")) for name, a in index.arrays().items()}
    with open(path, "wb") as handle:
        np.savez(handle, meta=np.array(json.dumps(meta)), **arrays)
    logger.info("saved %s index (%d bytes of structure) to %s", index.kind.value, index.memory_bytes, path)
    return path


def load_index(path: Union[str, Path], data: MaterialDataset) -> NnIndex:
    """Rebuild an index object from its archive, bound to `data`"""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive["meta"]))
            arrays = {name: archive[name] for name in archive.files if name != "meta"}
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise IndexFormatError(f"{path}: not a readable index archive ({exc})") from exc
    if meta.get("version") != INDEX_FORMAT_VERSION:
        raise IndexFormatError(f"{path}: unsupported index version {meta.get('version')}")
    if meta.get("fingerprint") != dataset_fingerprint(data):
        raise IndexFormatError(f"{path}: index was built for a different data set or metric")
    try:
        kind = BackendKind(meta["kind"])
        params = meta["params"]
        if kind is BackendKind.LINEAR:
            index = LinearIndex(data)
        elif kind is BackendKind.KDTREE:
            index = KdTreeIndex(data, params["leaf_size"], **arrays)
        elif kind is BackendKind.KMEANS:
            index = KMeansTreeIndex(data, params["branching"], params["seed"], **arrays)
        else:
            index = KnnGraph(data, arrays["adjacency"], params["builder"], params["builder_fd"], params["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IndexFormatError(f"{path}: index archive is missing fields ({exc})") from exc
    index.build_time_s = float(meta.get("build_time_s", 0.0))
    logger.info("loaded %s index from %s", kind.value, path)
    return index
