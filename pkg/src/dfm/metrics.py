"""OOD-detection metrics over confidence scores.

In-distribution samples are the positive class throughout and every score
column is oriented so that larger means more in-distribution (reconstruction
errors are stored negated).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import FormatError, InvalidValue

logger = logging.getLogger(__name__)


def _vec(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).ravel()
    if a.size == 0:
        raise InvalidValue("score vector is empty")
    if not np.all(np.isfinite(a)):
        raise InvalidValue("score vector contains NaN or Inf")
    return a


def auroc(scores_pos, scores_neg) -> float:
    """P(pos > neg) + P(pos == neg) / 2, counted by sorting."""
    pos, neg = _vec(scores_pos), np.sort(_vec(scores_neg))
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    # doubled counts stay integral, so the sum is exact
    twice = np.sum(below, dtype=np.int64) * 2 + np.sum(upto - below, dtype=np.int64)
    return float(twice) / (2.0 * pos.size * neg.size)


def _threshold_counts(pos: np.ndarray, neg: np.ndarray):
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size, bool), np.zeros(neg.size, bool)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_pos = scores[order], is_pos[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    tp = np.cumsum(is_pos)[ends]
    fp = (ends + 1) - tp
    return scores[ends], tp, fp


def aupr(scores_pos, scores_neg) -> float:
    """Average precision with in-distribution as the positive class."""
    pos, neg = _vec(scores_pos), _vec(scores_neg)
    _, tp, fp = _threshold_counts(pos, neg)
    precision = tp / (tp + fp)
    recall = tp / pos.size
    dr = np.diff(np.r_[0.0, recall])
    return float(np.sum(dr * precision))


def roc_curve(scores_pos, scores_neg) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, fpr, tpr), starting from the empty selection at +inf."""
    pos, neg = _vec(scores_pos), _vec(scores_neg)
    thr, tp, fp = _threshold_counts(pos, neg)
    return np.r_[np.inf, thr], np.r_[0.0, fp / neg.size], np.r_[0.0, tp / pos.size]


def pr_curve(scores_pos, scores_neg) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, recall, precision), one point per distinct score."""
    pos, neg = _vec(scores_pos), _vec(scores_neg)
    thr, tp, fp = _threshold_counts(pos, neg)
    return thr, tp / pos.size, tp / (tp + fp)


# ---------------------------------------------------------------------------
# Score tables


@dataclass(eq=False)
class ScoreTable:
    columns: dict[str, np.ndarray]
    membership: np.ndarray | None = None  # 1 = in-distribution
    sample_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        lengths = {k: np.asarray(v).shape[0] for k, v in self.columns.items()}
        n = next(iter(lengths.values()), 0)
        if any(length != n for length in lengths.values()):
            raise InvalidValue(f"score columns differ in length: {lengths}")
        self.columns = {k: np.asarray(v, dtype=np.float64) for k, v in self.columns.items()}
        if not self.sample_ids:
            self.sample_ids = [str(i) for i in range(n)]
        if len(self.sample_ids) != n:
            raise InvalidValue("sample_ids length differs from the score columns")
        if self.membership is not None:
            self.membership = np.asarray(self.membership, dtype=np.int64)
            if self.membership.shape != (n,):
                raise InvalidValue("membership length differs from the score columns")

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def split(self, column: str) -> tuple[np.ndarray, np.ndarray]:
        """(in-distribution scores, OOD scores) for one column."""
        if column not in self.columns:
            raise InvalidValue(f"unknown score column {column!r}")
        if self.membership is None:
            raise InvalidValue("table has no membership labels")
        v = self.columns[column]
        return v[self.membership == 1], v[self.membership == 0]

    @classmethod
    def combine(cls, table_in: "ScoreTable", table_out: "ScoreTable") -> "ScoreTable":
        """Stack an in-distribution table over an OOD table."""
        if table_in.names != table_out.names:
            raise InvalidValue(
                f"column mismatch: {table_in.names} vs {table_out.names}"
            )
        cols = {k: np.r_[table_in.columns[k], table_out.columns[k]] for k in table_in.names}
        member = np.r_[np.ones(len(table_in), np.int64), np.zeros(len(table_out), np.int64)]
        ids = [f"in:{s}" for s in table_in.sample_ids] + [f"out:{s}" for s in table_out.sample_ids]
        return cls(cols, member, ids)


def write_score_table(table: ScoreTable, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        header = ["sample_id"] + (["membership"] if table.membership is not None else []) + table.names
        w.writerow(header)
        for i, sid in enumerate(table.sample_ids):
            row = [sid]
            if table.membership is not None:
                row.append(str(int(table.membership[i])))
            row += [repr(float(table.columns[c][i])) for c in table.names]
            w.writerow(row)


def read_score_table(path: str | Path) -> ScoreTable:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or not rows[0] or rows[0][0] != "sample_id":
        raise FormatError(f"{path}: expected a 'sample_id' header")
    header, body = rows[0], [r for r in rows[1:] if r]
    has_member = len(header) > 1 and header[1] == "membership"
    names = header[2:] if has_member else header[1:]
    first = 2 if has_member else 1
    try:
        data = np.array([[float(x) for x in r[first:]] for r in body], dtype=np.float64).reshape(len(body), len(names))
        member = np.array([int(r[1]) for r in body]) if has_member else None
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return ScoreTable(
        {n: data[:, j] for j, n in enumerate(names)}, member, [r[0] for r in body]
    )


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class EvalResult:
    auroc: float
    aupr: float
    roc: tuple[np.ndarray, np.ndarray, np.ndarray] = field(repr=False)
    pr: tuple[np.ndarray, np.ndarray, np.ndarray] = field(repr=False)


def evaluate(table: ScoreTable, columns: Sequence[str] | None = None) -> dict[str, EvalResult]:
    out = {}
    for c in columns or table.names:
        pos, neg = table.split(c)
        out[c] = EvalResult(auroc(pos, neg), aupr(pos, neg), roc_curve(pos, neg), pr_curve(pos, neg))
    return out


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def write_metrics(results: Mapping[str, EvalResult], path: str | Path) -> None:
    """``{column}.auroc=...`` / ``{column}.aupr=...`` lines, one key per line."""
    with open(path, "w") as f:
        for c, r in results.items():
            f.write(f"{c}.auroc={r.auroc!r}\n")
            f.write(f"{c}.aupr={r.aupr!r}\n")


def read_metrics(path: str | Path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out


def write_curves(result: EvalResult, roc_path: str | Path, pr_path: str | Path) -> None:
    with open(roc_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, x, y in zip(*result.roc):
            w.writerow([_fmt(t), _fmt(x), _fmt(y)])
    with open(pr_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "recall", "precision"])
        for t, r, p in zip(*result.pr):
            w.writerow([_fmt(t), _fmt(r), _fmt(p)])


# ---------------------------------------------------------------------------
# Histograms


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    count_in: np.ndarray
    count_out: np.ndarray
    ood_empty: bool = False


def export_histograms(table: ScoreTable, column: str, bins: int = 50) -> Histogram:
    """Equal-width histograms of one column for in-distribution and OOD rows.

    Bins span the pooled min/max.  An empty OOD subset yields all-zero OOD
    counts with ``ood_empty`` set.
    """
    if column not in table.columns:
        raise InvalidValue(f"unknown score column {column!r}")
    if bins < 1:
        raise InvalidValue("bins must be positive")
    v = table.columns[column]
    member = table.membership if table.membership is not None else np.ones(v.size, np.int64)
    lo, hi = (float(v.min()), float(v.max())) if v.size else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    count_in, _ = np.histogram(v[member == 1], bins=edges)
    count_out, _ = np.histogram(v[member == 0], bins=edges)
    return Histogram(edges, count_in, count_out, ood_empty=bool(np.sum(member == 0) == 0))


def write_histogram(h: Histogram, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin_left", "count_in", "count_out"])
        for left, a, b in zip(h.edges[:-1], h.count_in, h.count_out):
            w.writerow([_fmt(left), int(a), int(b)])


# ---------------------------------------------------------------------------
# Cross-layer logistic combiner


@dataclass(frozen=True)
class LogisticCombiner:
    columns: list[str]
    mean: np.ndarray
    scale: np.ndarray
    weights: np.ndarray
    bias: float
    converged: bool
    iterations: int

    def decision(self, table: ScoreTable) -> np.ndarray:
        X = np.column_stack([table.columns[c] for c in self.columns])
        return ((X - self.mean) / self.scale) @ self.weights + self.bias


def _log_sigmoid(t: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -t)


def fit_logistic_combiner(
    table: ScoreTable,
    columns: Sequence[str] | None = None,
    l2: float = 1e-3,
    max_iter: int = 10_000,
    tol: float = 1e-8,
) -> LogisticCombiner:
    """L2-regularized logistic regression on standardized score columns.

    Plain gradient ascent with step ``1 / L`` (``L`` the Lipschitz constant of
    the gradient).  If the gradient norm is still above ``tol`` after
    ``max_iter`` steps, the best iterate is returned with ``converged=False``.
    """
    cols = list(columns or table.names)
    if len(cols) < 2:
        raise InvalidValue("the combiner needs at least two score columns")
    if table.membership is None or len(np.unique(table.membership)) < 2:
        raise InvalidValue("held-out table must contain both in-distribution and OOD rows")
    X = np.column_stack([table.columns[c] for c in cols])
    y = table.membership.astype(np.float64)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Xs = (X - mean) / scale
    A = np.column_stack([Xs, np.ones(len(y))])
    n = len(y)
    lip = 0.25 * float(np.linalg.eigvalsh(A.T @ A / n).max()) + l2
    step = 1.0 / lip
    theta = np.zeros(A.shape[1])
    reg_mask = np.r_[np.ones(Xs.shape[1]), 0.0]

    def objective(th):
        t = A @ th
        return float(np.mean(y * _log_sigmoid(t) + (1 - y) * _log_sigmoid(-t))) - 0.5 * l2 * float(
            np.sum((th * reg_mask) ** 2)
        )

    best, best_obj = theta.copy(), objective(theta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = 1.0 / (1.0 + np.exp(-(A @ theta)))
        grad = A.T @ (y - p) / n - l2 * theta * reg_mask
        if np.linalg.norm(grad) < tol:
            converged = True
            break
        theta = theta + step * grad
        obj = objective(theta)
        if obj > best_obj:
            best, best_obj = theta.copy(), obj
    if not converged:
        logger.warning("logistic combiner did not converge in %d iterations", max_iter)
        theta = best
    return LogisticCombiner(cols, mean, scale, theta[:-1], float(theta[-1]), converged, it)
