"""RBF kernel PCA, fixed-point pre-images and kernel reconstruction error.

A ``kernel="linear"`` variant (k(x, y) = x.y) exists as a test hook: every
operation then reduces to ordinary PCA, which gives an independent check on
the centering, normalization and pre-image code paths.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import DegenerateGram, DimensionMismatch, InsufficientSamples, InvalidValue
from .features import FeatureSet, split_per_class

logger = logging.getLogger(__name__)

EIG_FLOOR = 1e-10
DEFAULT_LEVEL = 0.95
DEFAULT_MAX_ANCHORS = 2000
GAMMA_MULTIPLIERS = (0.1, 0.5, 1.0, 2.0)
_RESTART_NEIGHBORS = 5


@dataclass(frozen=True, eq=False)
class KernelSubspace:
    anchors: np.ndarray  # (m, D)
    gamma: float
    alphas: np.ndarray  # (d, m); eigvals[i] * |alphas[i]|^2 == 1
    eigvals: np.ndarray  # (d,), centered-Gram eigenvalues, decreasing
    gram_row_means: np.ndarray  # (m,)
    gram_total_mean: float
    seed: int = 0
    kernel: str = "rbf"
    eig_total: float = 0.0  # sum of all eigenvalues above the floor

    def __post_init__(self) -> None:
        if self.kernel not in ("rbf", "linear"):
            raise InvalidValue(f"unknown kernel {self.kernel!r}")
        if self.kernel == "rbf" and not self.gamma > 0:
            raise InvalidValue(f"gamma must be positive, got {self.gamma}")
        m = self.anchors.shape[0]
        if self.alphas.ndim != 2 or self.alphas.shape[1] != m or self.eigvals.shape != (self.alphas.shape[0],):
            raise InvalidValue("alphas / eigvals shapes do not match the anchors")
        if np.any(self.eigvals <= 0):
            raise InvalidValue("kernel eigenvalues must be positive")
        if self.gram_row_means.shape != (m,):
            raise InvalidValue("centering statistics do not match the anchors")

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]

    @property
    def n_components(self) -> int:
        return self.alphas.shape[0]


def sq_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    aa = np.einsum("ij,ij->i", A, A)
    bb = np.einsum("ij,ij->i", B, B)
    d2 = aa[:, None] + bb[None, :] - 2.0 * (A @ B.T)
    return np.maximum(d2, 0.0)


def kernel_matrix(A: np.ndarray, B: np.ndarray, gamma: float, kernel: str = "rbf") -> np.ndarray:
    if kernel == "rbf":
        return np.exp(-gamma * sq_distances(A, B))
    if kernel == "linear":
        return A @ B.T
    raise InvalidValue(f"unknown kernel {kernel!r}")


def median_sq_distance(X: np.ndarray, max_points: int = 1000, seed: int = 0) -> float:
    """Median pairwise squared distance over (a seeded subset of) the rows."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] > max_points:
        idx = np.sort(np.random.default_rng(seed).choice(X.shape[0], max_points, replace=False))
        X = X[idx]
    d2 = sq_distances(X, X)
    iu = np.triu_indices(X.shape[0], k=1)
    med = float(np.median(d2[iu])) if iu[0].size else 0.0
    if med <= 0.0:
        raise DegenerateGram("all sampled points coincide; cannot set a kernel width")
    return med


def gamma_from_multiplier(X: np.ndarray, multiplier: float, seed: int = 0) -> float:
    """Median-heuristic RBF width: ``multiplier / median squared distance``."""
    return multiplier / median_sq_distance(X, seed=seed)


def _select(eigvals: np.ndarray, total: float, variance: float | None, n_components: int | None) -> int:
    if n_components is not None:
        if n_components < 1:
            raise InvalidValue(f"n_components must be >= 1, got {n_components}")
        if n_components > eigvals.size:
            logger.warning(
                "requested %d kernel components, only %d above the floor; capped",
                n_components, eigvals.size,
            )
        return min(n_components, eigvals.size)
    if variance is None or not 0.0 < variance <= 1.0:
        raise InvalidValue(f"eigenvalue fraction must lie in (0, 1], got {variance}")
    ratio = np.cumsum(eigvals) / total
    d = int(np.searchsorted(ratio, variance * (1 - 1e-12), side="left")) + 1
    return min(d, eigvals.size)


def fit_kpca(
    X: np.ndarray,
    gamma: float,
    variance: float | None = DEFAULT_LEVEL,
    n_components: int | None = None,
    max_anchors: int = DEFAULT_MAX_ANCHORS,
    seed: int = 0,
    kernel: str = "rbf",
) -> KernelSubspace:
    """Fit kernel PCA on (up to ``max_anchors`` of) the rows of ``X``.

    The retained dimension is ``n_components`` if given, else the smallest
    count whose share of the centered-Gram eigenvalue mass reaches
    ``variance``.

    Raises:
        InvalidValue: ``gamma <= 0`` for the RBF kernel.
        DegenerateGram: the centered Gram matrix has no usable eigenvalue.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch(f"expected 2-D data, got shape {X.shape}")
    if X.shape[0] < 2:
        raise InsufficientSamples(f"kernel PCA needs at least 2 samples, got {X.shape[0]}")
    if kernel == "rbf" and not gamma > 0:
        raise InvalidValue(f"gamma must be positive, got {gamma}")
    if X.shape[0] > max_anchors:
        rng = np.random.default_rng(seed)
        X = X[np.sort(rng.choice(X.shape[0], max_anchors, replace=False))]
    m = X.shape[0]

    K = kernel_matrix(X, X, gamma, kernel)
    row_means = K.mean(axis=0)
    total_mean = float(row_means.mean())
    Kc = K - row_means[None, :] - row_means[:, None] + total_mean
    Kc = 0.5 * (Kc + Kc.T)
    lam, V = np.linalg.eigh(Kc)
    lam, V = lam[::-1], V[:, ::-1]
    scale = max(float(np.abs(K).max()), np.finfo(float).tiny)
    if lam[0] <= 1e-12 * scale:
        raise DegenerateGram("centered Gram matrix is numerically zero")
    keep = lam > EIG_FLOOR * lam[0]
    lam, V = lam[keep], V[:, keep]
    total = float(lam.sum())
    d = _select(lam, total, variance, n_components)

    alphas = (V[:, :d] / np.sqrt(lam[:d])).T
    idx = np.argmax(np.abs(alphas), axis=1)
    alphas = alphas * np.sign(alphas[np.arange(d), idx])[:, None]
    return KernelSubspace(
        anchors=X,
        gamma=float(gamma),
        alphas=alphas,
        eigvals=lam[:d],
        gram_row_means=row_means,
        gram_total_mean=total_mean,
        seed=int(seed),
        kernel=kernel,
        eig_total=total,
    )


def truncate(S: KernelSubspace, variance: float | None = None, n_components: int | None = None) -> KernelSubspace:
    """Keep fewer components of a fitted model (same eigendecomposition)."""
    total = S.eig_total if S.eig_total > 0 else float(S.eigvals.sum())
    d = _select(S.eigvals, total, variance, n_components)
    return KernelSubspace(
        S.anchors, S.gamma, S.alphas[:d], S.eigvals[:d], S.gram_row_means,
        S.gram_total_mean, S.seed, S.kernel, S.eig_total,
    )


def _check(S: KernelSubspace, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != S.dim:
        raise DimensionMismatch(f"expected {S.dim}-dim input, got {x.shape[-1]}")
    return x


def centered_kernel_vectors(S: KernelSubspace, X: np.ndarray) -> np.ndarray:
    Kx = kernel_matrix(X, S.anchors, S.gamma, S.kernel)
    return Kx - Kx.mean(axis=1, keepdims=True) - S.gram_row_means[None, :] + S.gram_total_mean


def kproject(S: KernelSubspace, x: np.ndarray) -> np.ndarray:
    """Kernel principal coordinates of one vector or a batch of rows."""
    x = _check(S, x)
    single = x.ndim == 1
    Z = centered_kernel_vectors(S, np.atleast_2d(x)) @ S.alphas.T
    return Z[0] if single else Z


def expansion_coefficients(S: KernelSubspace, Z: np.ndarray) -> np.ndarray:
    """Anchor weights of the feature-space point a code maps back to.

    The projection equals sum_i coef_i * phi(anchor_i); the coefficients sum
    to one because the Gram-centering terms add back the feature-space mean.
    """
    m = S.anchors.shape[0]
    G = Z @ S.alphas
    return G + (1.0 - G.sum(axis=1, keepdims=True)) / m


def _nearest_mean(S: KernelSubspace, P: np.ndarray, k: int = _RESTART_NEIGHBORS) -> np.ndarray:
    d2 = sq_distances(P, S.anchors)
    k = min(k, S.anchors.shape[0])
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return S.anchors[nn].mean(axis=1)


def _embedding_init(S: KernelSubspace, Z: np.ndarray, k: int = _RESTART_NEIGHBORS) -> np.ndarray:
    # inverse-distance weighted mean of the anchors nearest in embedding space
    E = kproject(S, S.anchors)
    d2 = sq_distances(Z, E)
    k = min(k, S.anchors.shape[0])
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    w = 1.0 / (np.sqrt(np.take_along_axis(d2, nn, axis=1)) + 1e-12)
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("nk,nkd->nd", w, S.anchors[nn])


@dataclass(frozen=True)
class PreimageResult:
    x: np.ndarray
    converged: np.ndarray | bool
    iterations: np.ndarray | int


def preimage(
    S: KernelSubspace,
    z: np.ndarray,
    init: np.ndarray | None = None,
    max_iter: int = 200,
    tol: float = 1e-6,
) -> PreimageResult:
    """Approximate pre-image of kernel codes by fixed-point iteration.

    Each step replaces the estimate by the anchor average weighted with
    ``coef_i * k(x, anchor_i)``.  A non-positive weight sum triggers one
    restart from the mean of the nearest anchors; a second failure returns
    the nearest anchor with ``converged=False``.
    """
    Z = np.asarray(z, dtype=np.float64)
    single = Z.ndim == 1
    Z = np.atleast_2d(Z)
    if Z.shape[1] != S.n_components:
        raise DimensionMismatch(f"expected {S.n_components}-dim code, got {Z.shape[1]}")
    coef = expansion_coefficients(S, Z)
    A = S.anchors
    n = Z.shape[0]

    if S.kernel == "linear":
        # closed form: the projection is a point of input space
        X = coef @ A
        res = PreimageResult(X, np.ones(n, dtype=bool), np.zeros(n, dtype=int))
    else:
        X0 = _embedding_init(S, Z) if init is None else np.atleast_2d(_check(S, init)).copy()
        if X0.shape[0] != n:
            raise DimensionMismatch("init and z batch sizes differ")
        res = _fixed_point(S, coef, X0, max_iter, tol)
    if single:
        return PreimageResult(res.x[0], bool(res.converged[0]), int(res.iterations[0]))
    return res


def _fixed_point(S: KernelSubspace, coef: np.ndarray, X0: np.ndarray, max_iter: int, tol: float) -> PreimageResult:
    A = S.anchors
    n = X0.shape[0]
    X = X0.copy()
    active = np.ones(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    restarted = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        iters[idx] += 1
        logk = -S.gamma * sq_distances(X[idx], A)
        logk -= logk.max(axis=1, keepdims=True)
        W = coef[idx] * np.exp(logk)
        den = W.sum(axis=1)
        ok = den > 1e-12 * np.abs(W).sum(axis=1)

        good = idx[ok]
        if good.size:
            new = (W[ok] @ A) / den[ok, None]
            step = np.linalg.norm(new - X[good], axis=1)
            X[good] = new
            done = good[step < tol]
            converged[done] = True
            active[done] = False

        bad = idx[~ok]
        if bad.size:
            retry = bad[~restarted[bad]]
            if retry.size:
                X[retry] = _nearest_mean(S, X0[retry])
                restarted[retry] = True
            give_up = bad[restarted[bad] & ~np.isin(bad, retry)]
            if give_up.size:
                nn = np.argmin(sq_distances(X0[give_up], A), axis=1)
                X[give_up] = A[nn]
                active[give_up] = False
    if np.any(~converged):
        logger.debug("pre-image: %d of %d did not converge", int(np.sum(~converged)), n)
    return PreimageResult(X, converged, iters)


def kreconstruction_error(
    S: KernelSubspace,
    x: np.ndarray,
    max_iter: int = 200,
    tol: float = 1e-6,
    return_flags: bool = False,
):
    """Distance between ``x`` and the pre-image of its kernel code.

    The pre-image search starts at ``x`` itself.  With ``return_flags`` the
    per-sample convergence flags are returned as well; non-converged samples
    still get a finite score.
    """
    x = _check(S, x)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    res = preimage(S, kproject(S, X), init=X, max_iter=max_iter, tol=tol)
    err = np.linalg.norm(X - res.x, axis=1)
    conv = np.asarray(res.converged)
    if single:
        err, conv = float(err[0]), bool(conv[0])
    return (err, conv) if return_flags else err


@dataclass(frozen=True, eq=False)
class KernelBundle:
    mode: str
    models: Mapping[int, KernelSubspace]


def fit_kernel_bundle(
    X: np.ndarray,
    labels: np.ndarray | None,
    gamma: float,
    mode: str = "global",
    variance: float | None = DEFAULT_LEVEL,
    n_components: int | None = None,
    max_anchors: int = DEFAULT_MAX_ANCHORS,
    seed: int = 0,
    kernel: str = "rbf",
) -> KernelBundle:
    if mode == "global":
        return KernelBundle("global", {0: fit_kpca(X, gamma, variance, n_components, max_anchors, seed, kernel)})
    if mode != "per_class":
        raise InvalidValue(f"unknown reduction mode {mode!r}")
    groups = split_per_class(FeatureSet(X, labels))
    return KernelBundle(
        "per_class",
        {k: fit_kpca(Xk, gamma, variance, n_components, max_anchors, seed + k, kernel) for k, Xk in groups},
    )


def kbundle_error(B: KernelBundle, x: np.ndarray, max_iter: int = 200, tol: float = 1e-6) -> np.ndarray | float:
    errs = np.stack([np.asarray(kreconstruction_error(S, x, max_iter, tol)) for S in B.models.values()])
    out = errs.min(axis=0)
    return float(out) if out.ndim == 0 else out
