"""Hold-out hyper-parameter selection for each score family.

Every grid point is fitted on the training features and scored on a hold-out
in-distribution set against a hold-out auxiliary OOD set.  Each family keeps
the point with the best hold-out AUROC; near-ties (within 1e-12) go to the
smaller reduced dimension, then the smaller gamma.  Final test metrics must
come from data disjoint from the hold-out sets.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import density as dens
from . import kernel as kern
from . import linear as lin
from .errors import DFMError, DimensionMismatch, FitFailed, InvalidValue, LeakageError
from .features import FeatureSet
from .metrics import aupr, auroc
from .pipeline import DetectorConfig, LayerModel, _groups, _map_chunks, score_layer, subseed

logger = logging.getLogger(__name__)

TIE_TOL = 1e-12


@dataclass(frozen=True)
class GridSpec:
    variance_fractions: tuple[float, ...] = (0.9, 0.95, 0.99, 0.995)
    gamma_multipliers: tuple[float, ...] = kern.GAMMA_MULTIPLIERS
    # values <= 1 are eigenvalue fractions, larger values fixed dimensions
    kernel_levels: tuple[float, ...] = (0.9, 0.95, 0.99)
    density_kinds: tuple[str, ...] = ("separate_gaussian", "gmm")
    modes: tuple[str, ...] = ("global", "per_class")
    families: tuple[str, ...] = ("ll", "pes", "kll", "kpes")

    def __post_init__(self) -> None:
        for name in ("variance_fractions", "gamma_multipliers", "kernel_levels", "density_kinds", "modes", "families"):
            if not getattr(self, name):
                raise InvalidValue(f"grid axis {name} is empty")
        if any(not 0 < v <= 1 for v in self.variance_fractions):
            raise InvalidValue("variance fractions must lie in (0, 1]")
        if any(g <= 0 for g in self.gamma_multipliers):
            raise InvalidValue("gamma multipliers must be positive")
        if any(lv <= 0 or (lv > 1 and lv != int(lv)) for lv in self.kernel_levels):
            raise InvalidValue("kernel levels must be fractions in (0, 1] or integer dimensions")
        if any(k not in dens.KINDS for k in self.density_kinds):
            raise InvalidValue(f"density kinds must be among {dens.KINDS}")
        if any(m not in ("global", "per_class") for m in self.modes):
            raise InvalidValue("modes must be global or per_class")
        if any(f not in ("ll", "pes", "kll", "kpes") for f in self.families):
            raise InvalidValue("sweep families must be among ll, pes, kll, kpes")


def parse_grid(text: str) -> GridSpec:
    """``key=v1,v2,...`` lines naming GridSpec fields."""
    kw = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidValue(f"not a key=value line: {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        items = [v.strip() for v in value.split(",") if v.strip()]
        if key in ("variance_fractions", "gamma_multipliers", "kernel_levels"):
            try:
                kw[key] = tuple(float(v) for v in items)
            except ValueError:
                raise InvalidValue(f"bad number in {key}") from None
        elif key in ("density_kinds", "modes", "families"):
            kw[key] = tuple(items)
        else:
            raise InvalidValue(f"unknown grid key {key!r}")
    return GridSpec(**kw)


def _level(level: float) -> tuple[float | None, int | None]:
    return (None, int(level)) if level > 1 else (float(level), None)


@dataclass
class GridPoint:
    family: str
    variance: float | None = None
    mode: str | None = None
    density: str | None = None
    gamma_mult: float | None = None
    kernel_level: float | None = None
    reduced_dim: int = 0
    gamma: float = 0.0
    auroc: float = float("nan")
    aupr: float = float("nan")
    status: str = "ok"

    def overrides(self) -> dict:
        out: dict = {}
        if self.variance is not None:
            out["variance"] = self.variance
        if self.mode is not None:
            out["mode"] = self.mode
        if self.density is not None:
            out["density"] = self.density
        if self.gamma_mult is not None:
            out["gamma_mult"] = self.gamma_mult
        if self.kernel_level is not None:
            frac, dim = _level(self.kernel_level)
            out["kernel_level"] = frac if frac is not None else 1.0
            out["kernel_dim"] = dim
        return out


@dataclass
class SweepResult:
    points: list[GridPoint]
    selected: dict[str, GridPoint]
    criterion: str = "holdout_auroc"
    base: DetectorConfig = field(default_factory=DetectorConfig)

    def selected_config(self) -> DetectorConfig:
        """Replayable detector config with each family at its selected point."""
        fams = tuple(f for f in ("ll", "pes", "kll", "kpes") if f in self.selected)
        return replace(
            self.base,
            families=fams,
            overrides={f: self.selected[f].overrides() for f in fams},
        )


def row_digests(X: np.ndarray) -> set[bytes]:
    X = np.ascontiguousarray(X, dtype=np.float64)
    return {hashlib.sha1(r.tobytes()).digest() for r in X}


def check_disjoint(a: FeatureSet, b: FeatureSet) -> None:
    """Raise LeakageError if any feature row appears in both sets."""
    shared = row_digests(a.X) & row_digests(b.X)
    if shared:
        raise LeakageError(f"{len(shared)} feature rows occur in both sets")


def _select(points: list[GridPoint]) -> GridPoint | None:
    ok = [p for p in points if p.status == "ok"]
    if not ok:
        return None
    best = max(p.auroc for p in ok)
    near = [p for p in ok if p.auroc >= best - TIE_TOL]
    return min(near, key=lambda p: (p.reduced_dim, p.gamma))


def _evaluate(model: LayerModel, family: str, hin: np.ndarray, hood: np.ndarray, threads: int) -> tuple[float, float]:
    s_in = score_layer(model, hin, [family], threads)[family]
    s_out = score_layer(model, hood, [family], threads)[family]
    return auroc(s_in, s_out), aupr(s_in, s_out)


def sweep(
    train: FeatureSet,
    holdout_in: FeatureSet,
    holdout_ood: FeatureSet,
    grid: GridSpec = GridSpec(),
    base: DetectorConfig = DetectorConfig(),
    threads: int = 1,
) -> SweepResult:
    """Score every grid point on the hold-out pair and pick the best per family.

    Subspaces are fitted once at full retention and truncated for each
    reduction level, which yields the same subspace a direct fit would.

    Raises:
        FitFailed: no grid point of any family could be fitted.
    """
    for fs in (holdout_in, holdout_ood):
        if fs.dim != train.dim:
            raise DimensionMismatch(f"hold-out dimension {fs.dim} differs from training dimension {train.dim}")
    check_disjoint(train, holdout_ood)
    X = np.asarray(train.X, dtype=np.float64)
    hin, hood = holdout_in.X, holdout_ood.X
    seed = base.seed
    points: list[GridPoint] = []

    def run(p: GridPoint, build) -> None:
        try:
            model = build()
            p.auroc, p.aupr = _evaluate(model, p.family, hin, hood, threads)
        except DFMError as exc:
            p.status = exc.code
            logger.info("grid point %s failed: %s", p, exc)
        points.append(p)

    def layer(**kw) -> LayerModel:
        return LayerModel(train.layer_id, train.dim, base, **kw)

    if "ll" in grid.families:
        full = lin.fit_pca(X, variance=1.0)
        for v in grid.variance_fractions:
            S = lin.truncate(full, variance=v)
            Z = lin.project(S, X)
            for kind in grid.density_kinds:
                p = GridPoint("ll", variance=v, density=kind, reduced_dim=S.n_components)
                run(p, lambda S=S, Z=Z, kind=kind: layer(
                    ll_subspace=S,
                    ll_density=dens.fit_class_conditional(
                        _groups(train, Z), kind, base.reg, base.k_max, base.restarts,
                        subseed(seed, "em-restart.ll"),
                    ),
                ))

    if "pes" in grid.families:
        for mode in grid.modes:
            try:
                full_b = lin.fit_bundle(X, train.labels, mode, variance=1.0)
            except DFMError as exc:
                for v in grid.variance_fractions:
                    points.append(GridPoint("pes", variance=v, mode=mode, status=exc.code))
                continue
            for v in grid.variance_fractions:
                B = lin.SubspaceBundle(mode, {k: lin.truncate(S, variance=v) for k, S in full_b.models.items()})
                dim = max(S.n_components for S in B.models.values())
                run(GridPoint("pes", variance=v, mode=mode, reduced_dim=dim), lambda B=B: layer(pes=B))

    kernel_fams = [f for f in ("kll", "kpes") if f in grid.families]
    if kernel_fams:
        g0 = kern.median_sq_distance(X, seed=subseed(seed, "gamma"))
        for c in grid.gamma_multipliers:
            g = c / g0
            if "kll" in kernel_fams:
                try:
                    full_k = kern.fit_kpca(X, g, 1.0, None, base.max_anchors, subseed(seed, "fit.kll"))
                except DFMError as exc:
                    full_k = None
                    err = exc.code
                for lv in grid.kernel_levels:
                    frac, dim = _level(lv)
                    for kind in grid.density_kinds:
                        p = GridPoint("kll", density=kind, gamma_mult=c, kernel_level=lv, gamma=g)
                        if full_k is None:
                            p.status = err
                            points.append(p)
                            continue
                        K = kern.truncate(full_k, frac, dim)
                        p.reduced_dim = K.n_components

                        def build(K=K, kind=kind):
                            Z = _map_chunks(lambda A: kern.kproject(K, A), X, threads)
                            return layer(
                                kll_subspace=K,
                                kll_density=dens.fit_class_conditional(
                                    _groups(train, Z), kind, base.reg, base.k_max, base.restarts,
                                    subseed(seed, "em-restart.kll"),
                                ),
                            )

                        run(p, build)
            if "kpes" in kernel_fams:
                for mode in grid.modes:
                    try:
                        full_kb = kern.fit_kernel_bundle(
                            X, train.labels, g, mode, 1.0, None, base.max_anchors, subseed(seed, "fit.kpes")
                        )
                    except DFMError as exc:
                        for lv in grid.kernel_levels:
                            points.append(GridPoint("kpes", mode=mode, gamma_mult=c, kernel_level=lv, gamma=g, status=exc.code))
                        continue
                    for lv in grid.kernel_levels:
                        frac, dim = _level(lv)
                        KB = kern.KernelBundle(mode, {k: kern.truncate(K, frac, dim) for k, K in full_kb.models.items()})
                        rd = max(K.n_components for K in KB.models.values())
                        p = GridPoint("kpes", mode=mode, gamma_mult=c, kernel_level=lv, reduced_dim=rd, gamma=g)
                        run(p, lambda KB=KB: layer(kpes=KB))

    selected = {}
    for fam in grid.families:
        best = _select([p for p in points if p.family == fam])
        if best is not None:
            selected[fam] = best
    if not selected:
        raise FitFailed("every grid point failed")
    base_cfg = replace(base, overrides={})
    return SweepResult(points, selected, base=base_cfg)


_COLUMNS = (
    "family", "variance", "mode", "density", "gamma_mult", "kernel_level",
    "reduced_dim", "gamma", "auroc", "aupr", "status",
)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_sweep_csv(result: SweepResult, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(_COLUMNS)
        for p in result.points:
            w.writerow([_cell(getattr(p, c)) for c in _COLUMNS])


def manifest_text(result: SweepResult) -> str:
    """Selected configuration as a replayable detector config."""
    head = [f"# selection criterion: {result.criterion}"]
    for fam, p in result.selected.items():
        head.append(
            f"# {fam}: auroc={p.auroc!r} aupr={p.aupr!r} reduced_dim={p.reduced_dim}"
        )
    return "\n".join(head) + "\n" + result.selected_config().to_text()


def holdout_report(
    result: SweepResult,
    train: FeatureSet,
    test_in: FeatureSet,
    test_ood: FeatureSet,
    holdouts: Sequence[FeatureSet],
    threads: int = 1,
) -> dict[str, tuple[float, float]]:
    """Refit the selected configuration and evaluate on disjoint test data."""
    from .pipeline import fit_layer

    for h in holdouts:
        check_disjoint(h, test_in)
        check_disjoint(h, test_ood)
    model = fit_layer(train, result.selected_config(), threads)
    s_in = score_layer(model, test_in.X, threads=threads)
    s_out = score_layer(model, test_ood.X, threads=threads)
    return {f: (auroc(s_in[f], s_out[f]), aupr(s_in[f], s_out[f])) for f in s_in}
