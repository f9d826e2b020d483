"""
Dataset persistence: binary `.mdd` files and 12-column CSV

Binary layout (little-endian):
    header  magic "MDDSET\\0\\0", version u32, flags u32, N u64, M u32,
            reserved u32, seed i64, bound_lo f64, bound_hi f64   (56 bytes)
    payload N rows of 2M float64, strain then stress per point
    trailer sha256 of the payload (32 bytes)
The payload starts at a fixed offset so large files can be memory-mapped.
"""

import hashlib
import logging
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

from .errors import (
    DatasetChecksumError,
    DatasetFormatError,
    DatasetHeaderError,
    DatasetTruncatedError,
)
from .models import PHASE_SIZE, STRAIN_LABELS, STRESS_LABELS, VOIGT_SIZE, MaterialDataset

logger = logging.getLogger(__name__)

MAGIC = b"MDDSET\x00\x00"
VERSION = 1
HEADER = struct.Struct("<8sIIQIIqdd")
CHECKSUM_SIZE = 32
FLAG_HAS_SEED = 1
CSV_COLUMNS = list(STRAIN_LABELS + STRESS_LABELS)

PathLike = Union[str, Path]


def _format_for(path: Path, fmt: Optional[str]) -> str:
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt not in ("mdd", "csv"):
        raise DatasetFormatError(f"unsupported dataset format '{fmt}' for {path}; use .mdd or .csv")
    return fmt


def save_dataset(d: MaterialDataset, path: PathLike, fmt: Optional[str] = None) -> Path:
    """Write the data set; the format follows the extension unless fmt is given"""
    path = Path(path)
    if _format_for(path, fmt) == "csv":
        frame = pd.DataFrame(d.points, columns=CSV_COLUMNS)
        frame.to_csv(path, index=False, float_format="%.17g")
    else:
        payload = np.ascontiguousarray(d.points, dtype="<f8").tobytes()
        flags = FLAG_HAS_SEED if d.seed is not None else 0
        header = HEADER.pack(
            MAGIC, VERSION, flags, d.n_points, VOIGT_SIZE, 0,
            int(d.seed or 0), d.bounds[0], d.bounds[1],
        )
        with open(path, "wb") as handle:
            handle.write(header)
            handle.write(payload)
            handle.write(hashlib.sha256(payload).digest())
    logger.info("wrote %d points to %s", d.n_points, path)
    return path


def _load_binary(path: Path) -> MaterialDataset:
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise DatasetHeaderError(f"{path}: file too short for a dataset header ({len(raw)} bytes)")
    magic, version, flags, n, m, _, seed, lo, hi = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetHeaderError(f"{path}: bad magic bytes {magic!r}")
    if version != VERSION:
        raise DatasetHeaderError(f"{path}: unsupported dataset version {version}")
    if m != VOIGT_SIZE or n < 1:
        raise DatasetHeaderError(f"{path}: invalid header sizes N={n}, M={m}")
    payload_size = n * PHASE_SIZE * 8
    expected = HEADER.size + payload_size + CHECKSUM_SIZE
    if len(raw) < expected:
        raise DatasetTruncatedError(f"{path}: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise DatasetFormatError(f"{path}: {len(raw) - expected} unexpected bytes after the checksum")
    payload = raw[HEADER.size:HEADER.size + payload_size]
    stored = raw[HEADER.size + payload_size:expected]
    if hashlib.sha256(payload).digest() != stored:
        raise DatasetChecksumError(f"{path}: payload checksum mismatch")
    points = np.frombuffer(payload, dtype="<f8").reshape(n, PHASE_SIZE).astype(np.float64)
    return MaterialDataset(points=points, seed=seed if flags & FLAG_HAS_SEED else None, bounds=(lo, hi))


def _load_csv(path: Path) -> MaterialDataset:
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError as exc:
        raise DatasetHeaderError(f"{path}: empty CSV file") from exc
    if list(frame.columns) != CSV_COLUMNS:
        raise DatasetHeaderError(f"{path}: CSV header must be {','.join(CSV_COLUMNS)}")
    if frame.empty:
        raise DatasetTruncatedError(f"{path}: CSV has a header but no rows")
    try:
        points = frame.to_numpy(dtype=np.float64)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: CSV holds non-numeric values") from exc
    strains = points[:, :VOIGT_SIZE]
    return MaterialDataset(points=points, bounds=(float(strains.min()), float(strains.max())))


def load_dataset(path: PathLike, fmt: Optional[str] = None) -> MaterialDataset:
    """Read a data set written by save_dataset (or any conforming CSV)"""
    path = Path(path)
    kind = _format_for(path, fmt)
    if not path.is_file():
        raise DatasetFormatError(f"no dataset file at {path}")
    d = _load_csv(path) if kind == "csv" else _load_binary(path)
    logger.info("loaded %d points from %s", d.n_points, path)
    return d
