"""Class-conditional densities over reduced features.

Three model kinds:

* ``shared_gaussian``: one Gaussian per class with a single pooled covariance
  (the homoscedastic model behind the Mahalanobis score).
* ``separate_gaussian``: one Gaussian per class with its own covariance.
* ``gmm``: a Gaussian mixture per class, fitted by EM with the component
  count chosen by BIC.

Gaussian covariances use the 1/M normalizer and a scale-aware diagonal
floor ``reg * trace(cov) / d``.  Mixture components use a fixed ridge prior
instead (see :func:`run_em`) so that EM stays monotone.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import (
    DimensionMismatch,
    FitFailed,
    InsufficientSamples,
    InvalidValue,
    NumericalError,
    SingularCovariance,
)

logger = logging.getLogger(__name__)

KINDS = ("shared_gaussian", "separate_gaussian", "gmm")
DEFAULT_REG = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


class SmallClassWarning(UserWarning):
    """A class has fewer samples than needed for a full-rank covariance."""


@dataclass(frozen=True, eq=False)
class GaussianComponent:
    mean: np.ndarray
    covariance: np.ndarray
    chol: np.ndarray = field(repr=False)
    logdet: float = 0.0

    @classmethod
    def from_moments(cls, mean: np.ndarray, covariance: np.ndarray) -> "GaussianComponent":
        cov = 0.5 * (covariance + covariance.T)
        if not np.all(np.isfinite(cov)):
            raise NumericalError("non-finite covariance")
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise SingularCovariance("covariance is not positive definite after regularization") from None
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        if not math.isfinite(logdet):
            raise SingularCovariance("covariance log-determinant is not finite")
        return cls(np.asarray(mean, dtype=np.float64), cov, L, logdet)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def precision(self) -> np.ndarray:
        Linv = solve_triangular(self.chol, np.eye(self.dim), lower=True)
        return Linv.T @ Linv

    def mahalanobis_sq(self, Z: np.ndarray) -> np.ndarray:
        """Squared Mahalanobis distance of each row of ``Z``."""
        if self.dim == 0:
            return np.zeros(Z.shape[0])
        Y = solve_triangular(self.chol, (Z - self.mean).T, lower=True, check_finite=False)
        return np.einsum("ij,ij->j", Y, Y)

    def log_pdf(self, Z: np.ndarray) -> np.ndarray:
        return -0.5 * (self.dim * LOG_2PI + self.logdet + self.mahalanobis_sq(Z))


@dataclass(frozen=True, eq=False)
class MixtureDensity:
    weights: np.ndarray
    components: list[GaussianComponent]
    selected_k: int = 1
    loglik: float = float("nan")
    bic: dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if not self.components:
            raise InvalidValue("mixture needs at least one component")
        if w.shape != (len(self.components),) or np.any(w < 0) or abs(w.sum() - 1.0) >= 1e-12:
            raise InvalidValue("mixture weights must be a probability vector")

    @property
    def dim(self) -> int:
        return self.components[0].dim


@dataclass(frozen=True, eq=False)
class ClassConditionalModel:
    kind: str
    per_class: Mapping[int, MixtureDensity]
    reg: float = DEFAULT_REG

    @property
    def classes(self) -> list[int]:
        return list(self.per_class)

    @property
    def dim(self) -> int:
        return next(iter(self.per_class.values())).dim


# ---------------------------------------------------------------------------
# Fitting


def regularize(cov: np.ndarray, reg: float) -> np.ndarray:
    d = cov.shape[0]
    if d == 0:
        return cov
    tr = float(np.trace(cov))
    # a zero-trace (single repeated point) covariance falls back to an absolute floor
    floor = reg * tr / d if tr > 0 else reg
    return cov + floor * np.eye(d)


def _as_2d(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D sample matrix, got shape {X.shape}")
    return X


def fit_gaussian(X: np.ndarray, reg: float = DEFAULT_REG) -> GaussianComponent:
    """Maximum-likelihood Gaussian: sample mean and 1/M covariance, floored."""
    X = _as_2d(X)
    M = X.shape[0]
    if M < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {M}")
    mu = X.mean(axis=0)
    C = X - mu
    return GaussianComponent.from_moments(mu, regularize(C.T @ C / M, reg))


def _single(g: GaussianComponent) -> MixtureDensity:
    return MixtureDensity(np.ones(1), [g])


def fit_class_conditional(
    groups: Iterable[tuple[int, np.ndarray]],
    kind: str = "separate_gaussian",
    reg: float = DEFAULT_REG,
    k_max: int = 5,
    restarts: int = 3,
    seed: int = 0,
) -> ClassConditionalModel:
    """Fit one density per class.

    ``groups`` is a sequence of ``(class, rows)`` pairs such as the output of
    :func:`dfm.features.split_per_class`.
    """
    groups = [(int(k), _as_2d(Xk)) for k, Xk in groups]
    if kind not in KINDS:
        raise InvalidValue(f"unknown density kind {kind!r}")
    if not groups:
        raise InsufficientSamples("no classes to fit")
    for k, Xk in groups:
        if Xk.shape[0] < 2:
            raise InsufficientSamples(f"class {k} has {Xk.shape[0]} samples; need at least 2")

    if kind == "shared_gaussian":
        d = groups[0][1].shape[1]
        scatter = np.zeros((d, d))
        means = {}
        total = 0
        for k, Xk in groups:
            means[k] = Xk.mean(axis=0)
            C = Xk - means[k]
            scatter += C.T @ C
            total += Xk.shape[0]
        pooled = regularize(scatter / total, reg)
        shared = GaussianComponent.from_moments(np.zeros(d), pooled)
        per_class = {
            k: _single(GaussianComponent(mu, shared.covariance, shared.chol, shared.logdet))
            for k, mu in means.items()
        }
        return ClassConditionalModel(kind, per_class, reg)

    if kind == "separate_gaussian":
        for k, Xk in groups:
            if Xk.shape[0] < Xk.shape[1] + 1:
                warnings.warn(
                    f"class {k}: {Xk.shape[0]} samples for a {Xk.shape[1]}-dim covariance",
                    SmallClassWarning,
                    stacklevel=2,
                )
        return ClassConditionalModel(kind, {k: _single(fit_gaussian(Xk, reg)) for k, Xk in groups}, reg)

    return ClassConditionalModel(
        kind,
        {k: fit_gmm(Xk, k_max, restarts, seed + 7919 * k, reg) for k, Xk in groups},
        reg,
    )


# ---------------------------------------------------------------------------
# EM for Gaussian mixtures


@dataclass(frozen=True)
class EMRun:
    mixture: MixtureDensity | None
    loglik_history: list[float]
    objective_history: list[float]
    converged: bool


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    M = X.shape[0]
    centers = [X[rng.integers(M)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers.append(X[rng.integers(M)])
        else:
            centers.append(X[rng.choice(M, p=d2 / total)])
        d2 = np.minimum(d2, np.sum((X - centers[-1]) ** 2, axis=1))
    return np.array(centers)


def _log_resp(X: np.ndarray, weights: np.ndarray, comps: Sequence[GaussianComponent]) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return np.column_stack([lw + c.log_pdf(X) for lw, c in zip(logw, comps)])


def _penalty(comps: Sequence[GaussianComponent], ridge: float) -> float:
    # -(ridge / 2) * sum_j trace(inverse covariance_j)
    return -0.5 * ridge * sum(float(np.trace(c.precision)) for c in comps)


def run_em(
    X: np.ndarray,
    k: int,
    seed: int,
    reg: float = DEFAULT_REG,
    max_iter: int = 500,
    tol: float = 1e-6,
) -> EMRun:
    """One EM run from a k-means++ start.

    Covariances get a fixed ridge prior, so each M-step is an exact MAP
    update ``cov_j = S_j + ridge / N_j * I`` and the penalized log-likelihood
    cannot decrease.  ``ridge`` is ``reg * (trace(global cov) / d) * M / k``,
    which puts the floor near ``reg * trace / d`` for balanced components.

    Stops when the mean per-sample objective gains less than ``tol``.
    Returns ``mixture=None`` if a component collapses or a covariance turns
    singular.
    """
    X = _as_2d(X)
    M, d = X.shape
    rng = np.random.default_rng(seed)
    C = X - X.mean(axis=0)
    global_cov = regularize(C.T @ C / M, reg)
    ridge = reg * float(np.trace(global_cov)) / d * M / k
    try:
        comps = [GaussianComponent.from_moments(mu, global_cov) for mu in _kmeanspp(X, k, rng)]
    except NumericalError:
        return EMRun(None, [], [], False)
    weights = np.full(k, 1.0 / k)
    lls: list[float] = []
    objs: list[float] = []
    converged = False
    for _ in range(max_iter):
        L = _log_resp(X, weights, comps)
        norm = logsumexp(L, axis=1)
        ll = float(norm.sum())
        if not math.isfinite(ll):
            return EMRun(None, lls, objs, False)
        obj = ll + _penalty(comps, ridge)
        stop = bool(objs) and (obj - objs[-1]) / M < tol
        lls.append(ll)
        objs.append(obj)
        if stop:
            converged = True
            break
        R = np.exp(L - norm[:, None])
        Nk = R.sum(axis=0)
        if np.any(Nk < 1.0):
            return EMRun(None, lls, objs, False)
        means = (R.T @ X) / Nk[:, None]
        new = []
        try:
            for j in range(k):
                D = X - means[j]
                cov = (R[:, j, None] * D).T @ D / Nk[j] + (ridge / Nk[j]) * np.eye(d)
                new.append(GaussianComponent.from_moments(means[j], cov))
        except NumericalError:
            return EMRun(None, lls, objs, False)
        comps = new
        weights = Nk / Nk.sum()
    mix = MixtureDensity(weights, comps, selected_k=k, loglik=lls[-1])
    return EMRun(mix, lls, objs, converged)


def bic_param_count(k: int, d: int) -> int:
    return (k - 1) + k * d + k * d * (d + 1) // 2


def fit_gmm(
    X: np.ndarray,
    k_max: int = 5,
    restarts: int = 3,
    seed: int = 0,
    reg: float = DEFAULT_REG,
) -> MixtureDensity:
    """Fit mixtures with 1..k_max components and keep the lowest-BIC one.

    Each component count gets ``restarts`` seeded EM runs; the run with the
    highest final log-likelihood represents that count.

    Raises:
        FitFailed: every component count failed on every restart.
    """
    X = _as_2d(X)
    M, d = X.shape
    if M < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {M}")
    if M < 2 * k_max:
        logger.warning("k_max=%d too large for %d samples; capped at %d", k_max, M, M // 2)
        k_max = max(1, M // 2)
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(k_max * restarts, dtype=np.uint32).reshape(k_max, restarts)
    fits: dict[int, MixtureDensity] = {}
    bic: dict[int, float] = {}
    for k in range(1, k_max + 1):
        best = None
        for r in range(restarts if k > 1 else 1):
            run = run_em(X, k, int(seeds[k - 1, r]), reg)
            if run.mixture is not None and (best is None or run.mixture.loglik > best.loglik):
                best = run.mixture
        if best is None:
            logger.info("GMM with k=%d failed on all restarts; skipped", k)
            continue
        fits[k] = best
        bic[k] = bic_param_count(k, d) * math.log(M) - 2.0 * best.loglik
    if not fits:
        raise FitFailed("EM failed for every component count")
    k_best = min(bic, key=lambda k: (bic[k], k))
    chosen = fits[k_best]
    return MixtureDensity(chosen.weights, chosen.components, k_best, chosen.loglik, bic)


# ---------------------------------------------------------------------------
# Scoring


def _as_batch(Z: np.ndarray, d: int) -> tuple[np.ndarray, bool]:
    Z = np.asarray(Z, dtype=np.float64)
    single = Z.ndim == 1
    Z = np.atleast_2d(Z)
    if Z.shape[1] != d:
        raise DimensionMismatch(f"expected {d}-dim input, got {Z.shape[1]}")
    return Z, single


def log_density(m: MixtureDensity, z: np.ndarray) -> np.ndarray | float:
    """Log of the mixture density at ``z`` (one vector or a batch of rows)."""
    Z, single = _as_batch(z, m.dim)
    if len(m.components) == 1:
        out = m.components[0].log_pdf(Z)
    else:
        out = logsumexp(_log_resp(Z, m.weights, m.components), axis=1)
    return float(out[0]) if single else out


def class_log_densities(model: ClassConditionalModel, z: np.ndarray) -> np.ndarray:
    """(n, N) matrix of per-class log-densities, columns in ``model.classes`` order."""
    Z, _ = _as_batch(z, model.dim)
    return np.column_stack([log_density(m, Z) for m in model.per_class.values()])


def confidence_ll(model: ClassConditionalModel, z: np.ndarray) -> np.ndarray | float:
    """Maximum class-conditional log-density; higher means more in-distribution."""
    single = np.ndim(z) == 1
    out = class_log_densities(model, z).max(axis=1)
    return float(out[0]) if single else out


def mahalanobis_distances(model: ClassConditionalModel, z: np.ndarray) -> np.ndarray:
    if model.kind != "shared_gaussian":
        raise InvalidValue(f"Mahalanobis score needs a shared_gaussian model, got {model.kind}")
    Z, _ = _as_batch(z, model.dim)
    return np.column_stack([m.components[0].mahalanobis_sq(Z) for m in model.per_class.values()])


def mahalanobis_score(model: ClassConditionalModel, z: np.ndarray) -> np.ndarray | float:
    """Negative minimum squared Mahalanobis distance to the class means."""
    single = np.ndim(z) == 1
    out = -mahalanobis_distances(model, z).min(axis=1)
    return float(out[0]) if single else out
