"""Global and per-class PCA with pseudo-inverse reconstruction.

The reconstruction error of a feature vector is its distance to the fitted
affine subspace: project, map back with the pseudo-inverse (the transpose,
since the component rows are orthonormal) and take the L2 norm of the
residual.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import DimensionMismatch, InsufficientSamples, InvalidValue
from .features import FeatureSet, split_per_class

logger = logging.getLogger(__name__)

# singular values at or below this fraction of the largest are never kept
NOISE_FLOOR = 1e-10
DEFAULT_VARIANCE = 0.995


class CappedDimensionWarning(UserWarning):
    """Requested dimension exceeded the numerical rank and was reduced."""


@dataclass(frozen=True, eq=False)
class LinearSubspace:
    mean: np.ndarray
    components: np.ndarray  # (d, D), orthonormal rows
    spectrum: np.ndarray  # (d,), per-component variance
    variance_retained: float
    total_variance: float = 0.0

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def _sign_fix(V: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each row made positive
    if V.size == 0:
        return V
    idx = np.argmax(np.abs(V), axis=1)
    signs = np.sign(V[np.arange(V.shape[0]), idx])
    signs[signs == 0] = 1.0
    return V * signs[:, None]


def _select_dim(
    energy: np.ndarray, variance: float | None, n_components: int | None, total: float | None = None
) -> int:
    usable = energy.size
    if n_components is not None:
        if n_components < 1:
            raise InvalidValue(f"n_components must be >= 1, got {n_components}")
        if n_components > usable:
            msg = f"requested {n_components} components but numerical rank is {usable}; capped"
            warnings.warn(msg, CappedDimensionWarning, stacklevel=3)
            logger.warning(msg)
        return min(n_components, usable)
    if not 0.0 < variance <= 1.0:
        raise InvalidValue(f"variance fraction must lie in (0, 1], got {variance}")
    ratio = np.cumsum(energy) / (energy.sum() if total is None else total)
    m = int(np.searchsorted(ratio, variance * (1 - 1e-12), side="left")) + 1
    return min(m, usable)


def fit_pca(
    X: np.ndarray,
    variance: float | None = DEFAULT_VARIANCE,
    n_components: int | None = None,
) -> LinearSubspace:
    """Fit PCA by SVD of the centered data matrix.

    Exactly one criterion applies: ``n_components`` if given, otherwise the
    smallest dimension whose cumulative variance ratio reaches ``variance``.

    Raises:
        InsufficientSamples: fewer than two rows.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch(f"expected 2-D data, got shape {X.shape}")
    M = X.shape[0]
    if M < 2:
        raise InsufficientSamples(f"PCA needs at least 2 samples, got {M}")
    mean = X.mean(axis=0)
    _, s, Vt = np.linalg.svd(X - mean, full_matrices=False)
    keep = s > NOISE_FLOOR * s[0] if s[0] > 0 else np.zeros_like(s, dtype=bool)
    energy = s[keep] ** 2
    if energy.size == 0:
        # all samples identical: a zero-dimensional subspace at the mean
        D = X.shape[1]
        return LinearSubspace(mean, np.zeros((0, D)), np.zeros(0), 1.0, 0.0)
    # work in per-sample variances so truncate() reproduces these numbers exactly
    spectrum = energy / M
    total = float(np.sum(s**2)) / M
    d = _select_dim(spectrum, variance, n_components, total)
    return LinearSubspace(
        mean=mean,
        components=_sign_fix(Vt[:d]),
        spectrum=spectrum[:d],
        variance_retained=float(spectrum[:d].sum() / total),
        total_variance=total,
    )


def truncate(S: LinearSubspace, variance: float | None = None, n_components: int | None = None) -> LinearSubspace:
    """Re-select the retained dimension of an already-fitted subspace."""
    if S.n_components == 0:
        return S
    energy = S.spectrum
    if n_components is None and variance is None:
        raise InvalidValue("truncate needs a variance fraction or a dimension")
    # ratios are taken against the total variance seen at fit time
    total = S.total_variance if S.total_variance > 0 else float(energy.sum())
    d = _select_dim(energy, variance, n_components, total)
    return LinearSubspace(
        S.mean, S.components[:d], S.spectrum[:d], float(energy[:d].sum() / total), S.total_variance
    )


def _check_dim(S: LinearSubspace, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != S.dim:
        raise DimensionMismatch(f"expected {S.dim}-dim input, got {x.shape[-1]}")
    return x


def project(S: LinearSubspace, x: np.ndarray) -> np.ndarray:
    """Coordinates of ``x`` (one vector or a batch of rows) in the subspace."""
    x = _check_dim(S, x)
    return (x - S.mean) @ S.components.T


def reconstruct(S: LinearSubspace, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != S.n_components:
        raise DimensionMismatch(f"expected {S.n_components}-dim code, got {z.shape[-1]}")
    return S.mean + z @ S.components


def reconstruction_error(S: LinearSubspace, x: np.ndarray) -> np.ndarray | float:
    """L2 distance between ``x`` and its reconstruction from the subspace."""
    x = _check_dim(S, x)
    r = x - reconstruct(S, project(S, x))
    err = np.sqrt(np.sum(r * r, axis=-1))
    return float(err) if np.ndim(err) == 0 else err


@dataclass(frozen=True, eq=False)
class SubspaceBundle:
    """One global subspace, or one subspace per class."""

    mode: str  # "global" | "per_class"
    models: Mapping[int, LinearSubspace]

    def __post_init__(self) -> None:
        if self.mode not in ("global", "per_class"):
            raise InvalidValue(f"unknown reduction mode {self.mode!r}")


def fit_bundle(
    X: np.ndarray,
    labels: np.ndarray | None,
    mode: str = "global",
    variance: float | None = DEFAULT_VARIANCE,
    n_components: int | None = None,
) -> SubspaceBundle:
    if mode == "global":
        return SubspaceBundle("global", {0: fit_pca(X, variance, n_components)})
    groups = split_per_class(FeatureSet(X, labels))
    return SubspaceBundle(
        "per_class", {k: fit_pca(Xk, variance, n_components) for k, Xk in groups}
    )


def bundle_error(B: SubspaceBundle, x: np.ndarray) -> np.ndarray | float:
    """Reconstruction error; per-class bundles take the minimum over classes."""
    errs = np.stack([np.asarray(reconstruction_error(S, x)) for S in B.models.values()])
    out = errs.min(axis=0)
    return float(out) if out.ndim == 0 else out
