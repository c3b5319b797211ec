"""Fit and score the five confidence-score families for one feature layer.

Families (all oriented so that higher means more in-distribution):

``mahal``  shared-covariance Gaussians on the raw features, negative minimum
           squared Mahalanobis distance.
``ll``     class-conditional density in the global PCA subspace, max log-density.
``pes``    negated PCA reconstruction error (global or per-class subspaces).
``kll``    class-conditional density in the kernel-PCA embedding.
``kpes``   negated kernel-PCA reconstruction error via fixed-point pre-images.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import density as dens
from . import kernel as kern
from . import linear as lin
from .errors import DimensionMismatch, InvalidValue, LabelsRequired, MissingSection
from .features import FeatureSet

logger = logging.getLogger(__name__)

FAMILIES = ("mahal", "ll", "pes", "kll", "kpes")
CHUNK = 256


def subseed(seed: int, name: str) -> int:
    """Stable named sub-seed derived from the master seed."""
    h = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(h[:4], "little")


@dataclass(frozen=True)
class DetectorConfig:
    families: tuple[str, ...] = FAMILIES
    variance: float = lin.DEFAULT_VARIANCE
    n_components: int | None = None
    mode: str = "global"
    density: str = "separate_gaussian"
    reg: float = dens.DEFAULT_REG
    k_max: int = 5
    restarts: int = 3
    gamma: float | None = None
    gamma_mult: float = 1.0
    kernel_level: float = kern.DEFAULT_LEVEL
    kernel_dim: int | None = None
    max_anchors: int = kern.DEFAULT_MAX_ANCHORS
    preimage_iter: int = 200
    preimage_tol: float = 1e-6
    seed: int = 0
    # per-family overrides, e.g. {"pes": {"variance": 0.9}}
    overrides: dict[str, dict[str, object]] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        bad = [f for f in self.families if f not in FAMILIES]
        if bad or not self.families:
            raise InvalidValue(f"unknown score families {bad}; choose from {FAMILIES}")
        for fam, ov in self.overrides.items():
            if fam not in FAMILIES:
                raise InvalidValue(f"override for unknown family {fam!r}")
            for key in ov:
                if key in ("families", "overrides", "seed") or key not in _FIELD_TYPES:
                    raise InvalidValue(f"cannot override {key!r} per family")
        for fam in self.families:
            c = self.resolve(fam)
            if c.mode not in ("global", "per_class"):
                raise InvalidValue(f"unknown reduction mode {c.mode!r}")
            if c.density not in dens.KINDS:
                raise InvalidValue(f"unknown density kind {c.density!r}")

    def resolve(self, family: str) -> "DetectorConfig":
        ov = self.overrides.get(family)
        return replace(self, overrides={}, **ov) if ov else self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "overrides":
                continue
            lines.append(f"{f.name}={_fmt(getattr(self, f.name))}")
        for fam in sorted(self.overrides):
            for key in sorted(self.overrides[fam]):
                lines.append(f"{fam}.{key}={_fmt(self.overrides[fam][key])}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(DetectorConfig)}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, raw: str):
    typ = _FIELD_TYPES[key]
    raw = raw.strip()
    if "None" in typ and raw.lower() in ("none", ""):
        return None
    try:
        if key == "families":
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise InvalidValue(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str, base: DetectorConfig | None = None) -> DetectorConfig:
    """Parse ``key=value`` lines; ``family.key=value`` sets a per-family override."""
    items = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidValue(f"not a key=value line: {raw!r}")
        k, v = line.split("=", 1)
        items.append((k.strip(), v))
    return apply_settings(base or DetectorConfig(), items)


def apply_settings(cfg: DetectorConfig, items) -> DetectorConfig:
    top: dict = {}
    overrides = {fam: dict(ov) for fam, ov in cfg.overrides.items()}
    for key, raw in items:
        if "." in key:
            fam, sub = key.split(".", 1)
            if fam not in FAMILIES or sub not in _FIELD_TYPES:
                raise InvalidValue(f"unknown config key {key!r}")
            overrides.setdefault(fam, {})[sub] = _parse_value(sub, raw)
        elif key in _FIELD_TYPES and key != "overrides":
            top[key] = _parse_value(key, raw)
        else:
            raise InvalidValue(f"unknown config key {key!r}")
    return replace(cfg, overrides=overrides, **top)


# ---------------------------------------------------------------------------


@dataclass(eq=False)
class LayerModel:
    """Everything fitted for one layer; ``None`` for families not configured."""

    layer_id: str
    dim: int
    config: DetectorConfig
    mahal: dens.ClassConditionalModel | None = None
    ll_subspace: lin.LinearSubspace | None = None
    ll_density: dens.ClassConditionalModel | None = None
    pes: lin.SubspaceBundle | None = None
    kll_subspace: kern.KernelSubspace | None = None
    kll_density: dens.ClassConditionalModel | None = None
    kpes: kern.KernelBundle | None = None

    @property
    def families(self) -> list[str]:
        have = {
            "mahal": self.mahal is not None,
            "ll": self.ll_density is not None,
            "pes": self.pes is not None,
            "kll": self.kll_density is not None,
            "kpes": self.kpes is not None,
        }
        return [f for f in FAMILIES if have[f]]


def _groups(fs: FeatureSet, X: np.ndarray | None = None) -> list[tuple[int, np.ndarray]]:
    X = fs.X if X is None else X
    if fs.labels is None:
        return [(0, np.asarray(X, dtype=np.float64))]
    return [(k, np.asarray(X[fs.labels == k], dtype=np.float64)) for k in fs.classes()]


def _map_chunks(fn: Callable[[np.ndarray], np.ndarray], X: np.ndarray, threads: int) -> np.ndarray:
    # fixed chunk boundaries keep results independent of the worker count
    chunks = [X[i:i + CHUNK] for i in range(0, X.shape[0], CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    return np.concatenate(parts, axis=0)


def kernel_gamma(cfg: DetectorConfig, X: np.ndarray, seed: int) -> float:
    if cfg.gamma is not None:
        return float(cfg.gamma)
    return kern.gamma_from_multiplier(X, cfg.gamma_mult, seed=subseed(seed, "gamma"))


def fit_layer(fs: FeatureSet, cfg: DetectorConfig, threads: int = 1) -> LayerModel:
    """Fit every configured family on one layer's training features."""
    X = np.asarray(fs.X, dtype=np.float64)
    model = LayerModel(fs.layer_id, fs.dim, cfg)
    needs_labels = any(cfg.resolve(f).mode == "per_class" for f in cfg.families if f in ("pes", "kpes"))
    if needs_labels and fs.labels is None:
        raise LabelsRequired("per-class reduction needs labeled training features")

    if "mahal" in cfg.families:
        c = cfg.resolve("mahal")
        model.mahal = dens.fit_class_conditional(_groups(fs), "shared_gaussian", c.reg)

    if "ll" in cfg.families:
        c = cfg.resolve("ll")
        S = lin.fit_pca(X, c.variance, c.n_components)
        model.ll_subspace = S
        model.ll_density = dens.fit_class_conditional(
            _groups(fs, lin.project(S, X)), c.density, c.reg, c.k_max, c.restarts,
            subseed(c.seed, "em-restart.ll"),
        )

    if "pes" in cfg.families:
        c = cfg.resolve("pes")
        model.pes = lin.fit_bundle(X, fs.labels, c.mode, c.variance, c.n_components)

    if "kll" in cfg.families:
        c = cfg.resolve("kll")
        g = kernel_gamma(c, X, c.seed)
        K = kern.fit_kpca(X, g, c.kernel_level, c.kernel_dim, c.max_anchors, subseed(c.seed, "fit.kll"))
        model.kll_subspace = K
        Z = _map_chunks(lambda A: kern.kproject(K, A), X, threads)
        model.kll_density = dens.fit_class_conditional(
            _groups(fs, Z), c.density, c.reg, c.k_max, c.restarts, subseed(c.seed, "em-restart.kll"),
        )

    if "kpes" in cfg.families:
        c = cfg.resolve("kpes")
        g = kernel_gamma(c, X, c.seed)
        model.kpes = kern.fit_kernel_bundle(
            X, fs.labels, g, c.mode, c.kernel_level, c.kernel_dim, c.max_anchors,
            subseed(c.seed, "fit.kpes"),
        )
    return model


def score_layer(
    model: LayerModel,
    X: np.ndarray,
    families: list[str] | None = None,
    threads: int = 1,
) -> dict[str, np.ndarray]:
    """Per-sample confidence scores, one array per requested family."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise DimensionMismatch(f"layer {model.layer_id} expects {model.dim}-dim features, got shape {X.shape}")
    families = list(families or model.families)
    missing = [f for f in families if f not in model.families]
    if missing:
        raise MissingSection(f"model for layer {model.layer_id} has no sections for {missing}")
    cfg = model.config
    out: dict[str, np.ndarray] = {}
    for fam in families:
        if fam == "mahal":
            fn = lambda A: dens.mahalanobis_score(model.mahal, A)  # noqa: E731
        elif fam == "ll":
            fn = lambda A: dens.confidence_ll(model.ll_density, lin.project(model.ll_subspace, A))  # noqa: E731
        elif fam == "pes":
            fn = lambda A: -lin.bundle_error(model.pes, A)  # noqa: E731
        elif fam == "kll":
            fn = lambda A: dens.confidence_ll(model.kll_density, kern.kproject(model.kll_subspace, A))  # noqa: E731
        else:
            c = cfg.resolve("kpes")
            fn = lambda A, c=c: -kern.kbundle_error(model.kpes, A, c.preimage_iter, c.preimage_tol)  # noqa: E731
        out[fam] = _map_chunks(lambda A, fn=fn: np.atleast_1d(fn(A)), X, threads)
    return out


def summarize(model: LayerModel) -> list[str]:
    """Human-readable fit summary lines."""
    lines = [f"layer {model.layer_id}: D={model.dim}"]
    if model.mahal is not None:
        lines.append(f"  mahal: shared covariance over {len(model.mahal.classes)} classes")
    if model.ll_subspace is not None:
        S = model.ll_subspace
        lines.append(f"  ll: pca dim={S.n_components} retained={S.variance_retained:.6f} density={model.ll_density.kind}")
        lines += _bic_lines(model.ll_density)
    if model.pes is not None:
        dims = {k: S.n_components for k, S in model.pes.models.items()}
        lines.append(f"  pes: mode={model.pes.mode} dims={dims}")
    if model.kll_subspace is not None:
        K = model.kll_subspace
        lines.append(
            f"  kll: kpca dim={K.n_components} gamma={K.gamma:.6g} anchors={K.anchors.shape[0]} density={model.kll_density.kind}"
        )
        lines += _bic_lines(model.kll_density)
    if model.kpes is not None:
        dims = {k: K.n_components for k, K in model.kpes.models.items()}
        lines.append(f"  kpes: mode={model.kpes.mode} dims={dims}")
    return lines


def _bic_lines(model: dens.ClassConditionalModel) -> list[str]:
    if model.kind != "gmm":
        return []
    out = []
    for k, m in model.per_class.items():
        table = " ".join(f"k={j}:{b:.3f}" for j, b in m.bic.items())
        out.append(f"    class {k}: selected k={m.selected_k} BIC {table}")
    return out
