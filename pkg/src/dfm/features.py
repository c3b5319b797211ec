"""Feature matrices: the DFM1 container, CSV ingestion, splitting and rank analysis.

DFM1 layout (little-endian)::

    magic   4 bytes  b"DFM1"
    version u32      1
    rows    u64
    cols    u64
    dtype   u8       0 = f32, 1 = f64, 2 = i32
    payload rows * cols values, row-major

Label files use the same header with ``cols == 1`` and ``dtype == 2``.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    FormatError,
    InsufficientSamples,
    InvalidValue,
    LabelsRequired,
)

logger = logging.getLogger(__name__)

MAGIC = b"DFM1"
VERSION = 1
_HEADER = struct.Struct("<4sIQQB")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int32"): 2}

DEFAULT_VARIANCES = (0.9, 0.95, 0.99, 0.995)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Labeled matrix of feature vectors taken from one network layer.

    Arrays are stored read-only so a FeatureSet can be shared freely.
    """

    X: np.ndarray
    labels: np.ndarray | None = None
    layer_id: str = "layer0"
    class_count: int | None = None

    def __post_init__(self) -> None:
        X = np.asarray(self.X)
        if X.dtype not in (np.float32, np.float64):
            X = X.astype(np.float64)
        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
            raise FormatError(f"feature matrix must be 2-D and non-empty, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise InvalidValue("feature matrix contains NaN or Inf")
        object.__setattr__(self, "X", _readonly(np.array(X, copy=True)))

        if self.labels is not None:
            y = np.asarray(self.labels)
            if y.ndim != 1 or y.shape[0] != X.shape[0]:
                raise DimensionMismatch(
                    f"{X.shape[0]} feature rows but labels of shape {y.shape}"
                )
            if y.size and not np.issubdtype(y.dtype, np.integer):
                if not np.all(np.mod(y, 1) == 0):
                    raise InvalidValue("labels must be integers")
            y = y.astype(np.int64)
            if np.any(y < 0):
                raise InvalidValue("labels must be non-negative")
            n = int(y.max()) + 1
            if self.class_count is None:
                object.__setattr__(self, "class_count", n)
            elif n > self.class_count:
                raise InvalidValue(f"label {n - 1} outside [0, {self.class_count})")
            object.__setattr__(self, "labels", _readonly(y))

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def classes(self) -> list[int]:
        if self.labels is None:
            raise LabelsRequired("operation requires class labels")
        return sorted(int(c) for c in np.unique(self.labels))

    def take(self, idx: np.ndarray) -> "FeatureSet":
        labels = None if self.labels is None else self.labels[idx]
        return FeatureSet(self.X[idx], labels, self.layer_id, self.class_count)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureSet):
            return NotImplemented
        if self.X.dtype != other.X.dtype or self.X.shape != other.X.shape:
            return False
        if self.X.tobytes() != other.X.tobytes():
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class RankReport:
    dim: int
    rank: int
    pca_dim_at: dict[float, int]
    singular_values: np.ndarray = field(repr=False, compare=False)


# ---------------------------------------------------------------------------
# DFM1 I/O


def write_matrix(path: str | Path, a: np.ndarray) -> None:
    """Write a 2-D f32/f64/i32 array as a DFM1 file."""
    a = np.asarray(a)
    if a.ndim == 1:
        a = a[:, None]
    code = _DTYPE_CODES.get(a.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {a.dtype}")
    payload = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
    header = _HEADER.pack(MAGIC, VERSION, a.shape[0], a.shape[1], code)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_matrix(path: str | Path) -> np.ndarray:
    """Read a DFM1 file; returns an array with the stored dtype (native order)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, rows, cols, code = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dt = _DTYPES[code]
    expected = rows * cols * dt.itemsize
    body = raw[_HEADER.size:]
    if len(body) != expected:
        raise FormatError(f"{path}: payload has {len(body)} bytes, header implies {expected}")
    a = np.frombuffer(body, dtype=dt).reshape(rows, cols)
    return a.astype(dt.newbyteorder("="))


def _is_dfm(path: Path) -> bool:
    with open(path, "rb") as f:
        return f.read(4) == MAGIC


def _read_labels(path: Path) -> np.ndarray:
    if _is_dfm(path):
        y = read_matrix(path)
        if y.shape[1] != 1 or y.dtype != np.int32:
            raise FormatError(f"{path}: label file must have cols=1 and dtype i32")
        return y[:, 0]
    try:
        values = [line.strip() for line in path.read_text().splitlines() if line.strip()]
        return np.array([int(v) for v in values], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: cannot parse labels: {exc}") from None


def _read_csv(path: Path, label_col: int | None) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r and any(c.strip() for c in r)]
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        rows = rows[1:]  # header row
    try:
        data = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if data.ndim != 2:
        raise FormatError(f"{path}: ragged rows")
    labels = None
    if label_col is not None:
        if not -data.shape[1] <= label_col < data.shape[1]:
            raise FormatError(f"{path}: label column {label_col} out of range")
        labels = data[:, label_col]
        if not np.all(np.isfinite(labels)):
            raise InvalidValue(f"{path}: non-finite label")
        data = np.delete(data, label_col, axis=1)
    return data, labels


def load_features(
    path: str | Path,
    format: str | None = None,
    labels_path: str | Path | None = None,
    label_col: int | None = None,
    layer_id: str | None = None,
) -> FeatureSet:
    """Load a feature matrix from DFM1 (``binary``) or CSV.

    ``format`` defaults to CSV for ``*.csv`` paths and binary otherwise.
    """
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "binary"
    if format == "binary":
        X = read_matrix(path)
        if X.dtype == np.int32:
            raise FormatError(f"{path}: integer payload is not a feature matrix")
        labels = None
    elif format == "csv":
        X, labels = _read_csv(path, label_col)
    else:
        raise FormatError(f"unknown format {format!r}")
    if labels_path is not None:
        labels = _read_labels(Path(labels_path))
        if labels.shape[0] != X.shape[0]:
            raise DimensionMismatch(
                f"{path} has {X.shape[0]} rows but {labels_path} has {labels.shape[0]} labels"
            )
    return FeatureSet(X, labels, layer_id or path.stem)


def save_features(fs: FeatureSet, path: str | Path, labels_path: str | Path | None = None) -> None:
    """Write ``fs`` as DFM1; labels go to ``labels_path`` (default ``<path>.labels``)."""
    path = Path(path)
    write_matrix(path, fs.X)
    if fs.labels is not None:
        lp = Path(labels_path) if labels_path is not None else label_path_for(path)
        write_matrix(lp, fs.labels.astype(np.int32))


def label_path_for(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".labels")


# ---------------------------------------------------------------------------
# Splitting


def split_per_class(fs: FeatureSet) -> list[tuple[int, np.ndarray]]:
    """Partition rows by label, preserving the original row order within a class."""
    if fs.labels is None:
        raise LabelsRequired("split_per_class needs labels")
    return [(k, fs.X[fs.labels == k]) for k in fs.classes()]


def subsample(fs: FeatureSet, fraction: float, seed: int) -> FeatureSet:
    """Stratified subsample keeping ``round(fraction * M_k)`` rows of each class.

    Unlabeled sets are treated as a single class.  Selected rows keep their
    original relative order.
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidValue(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return fs
    rng = np.random.default_rng(seed)
    labels = fs.labels if fs.labels is not None else np.zeros(fs.n_samples, dtype=np.int64)
    keep = []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        n = int(math.floor(fraction * idx.size + 0.5))
        if fraction * idx.size < 2 or n < 2:
            raise InsufficientSamples(
                f"class {k}: fraction {fraction} of {idx.size} samples leaves fewer than 2"
            )
        keep.append(rng.choice(idx, size=n, replace=False))
    return fs.take(np.sort(np.concatenate(keep)))


# ---------------------------------------------------------------------------
# Rank analysis


def numerical_rank(
    X: np.ndarray,
    rel_tol: float = 1e-6,
    variances: Sequence[float] = DEFAULT_VARIANCES,
    center: bool = True,
) -> RankReport:
    """Numerical rank and PCA dimension needed for each variance-retention level.

    The rank counts singular values above ``rel_tol * sigma_max``.  With
    ``center`` (the default) column means are removed first, as PCA does.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise FormatError(f"expected a non-empty 2-D matrix, got shape {X.shape}")
    if center:
        X = X - X.mean(axis=0)
    s = np.linalg.svd(X, compute_uv=False)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > rel_tol * smax)) if smax > 0 else 0
    energy = s[:rank] ** 2
    pca_dim_at: dict[float, int] = {}
    if rank:
        ratio = np.cumsum(energy) / np.sum(s**2)
        for v in sorted(variances):
            if not 0.0 < v <= 1.0:
                raise InvalidValue(f"variance level must lie in (0, 1], got {v}")
            m = int(np.searchsorted(ratio, v * (1 - 1e-12), side="left")) + 1
            pca_dim_at[float(v)] = min(m, rank)
    else:
        pca_dim_at = {float(v): 0 for v in sorted(variances)}
    return RankReport(X.shape[1], rank, pca_dim_at, s)
