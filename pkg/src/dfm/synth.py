"""Synthetic deep-feature benchmark.

Classes live on a random ``d``-dimensional linear subspace of ``R^D`` with
their own (possibly heteroscedastic) axis-aligned spreads in subspace
coordinates; isotropic ambient noise is added on top.  Three OOD modes:

``off_subspace``
    in-subspace part drawn around the class means with the pooled spread
    scaled by ``ood_scale``, plus a component of norm ``ood_offset``
    orthogonal to the subspace.
``in_subspace_outlier``
    the same in-subspace part without the orthogonal component.
``far_shift``
    in-distribution samples translated by ``ood_shift`` along a random
    ambient direction.

Specs are plain ``key=value`` text; see ``dfm/configs/*.cfg``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import InvalidValue
from .features import FeatureSet

OOD_MODES = ("off_subspace", "far_shift", "in_subspace_outlier")


@dataclass(frozen=True)
class SynthSpec:
    D: int = 64
    d: int = 8
    N: int = 4
    n_train: int = 200
    n_test: int = 100
    n_ood: int = 400
    class_spectra: tuple[tuple[float, ...], ...] = ()
    class_sep: float = 2.0
    noise: float = 0.0
    ood_mode: str = "off_subspace"
    ood_offset: float = 1.0
    ood_scale: float = 2.0
    ood_shift: float = 10.0
    seed: int = 0
    layer_id: str = "synth"

    def __post_init__(self) -> None:
        if not 0 < self.d < self.D:
            raise InvalidValue(f"need 0 < d < D, got d={self.d}, D={self.D}")
        if self.N < 1:
            raise InvalidValue("need at least one class")
        if min(self.n_train, self.n_test, self.n_ood) < 2:
            raise InvalidValue("all sample counts must be at least 2")
        if self.ood_mode not in OOD_MODES:
            raise InvalidValue(f"unknown OOD mode {self.ood_mode!r}")
        if self.noise < 0:
            raise InvalidValue("noise floor must be non-negative")
        if self.ood_mode == "off_subspace" and not (self.ood_offset > 0 and self.ood_offset >= 5 * self.noise):
            raise InvalidValue("ood_offset must be positive and at least 5x the noise floor")
        spectra = self.spectra()
        if spectra.shape != (self.N, self.d) or np.any(spectra <= 0):
            raise InvalidValue(f"class_spectra must give {self.N} positive rows of length {self.d}")

    def spectra(self) -> np.ndarray:
        if not self.class_spectra:
            return np.ones((self.N, self.d))
        rows = [list(r) for r in self.class_spectra]
        if len(rows) == 1:
            rows = rows * self.N
        if any(len(r) != len(rows[0]) for r in rows):
            raise InvalidValue("class_spectra rows differ in length")
        return np.array(rows, dtype=np.float64)


def parse_spec(text: str) -> SynthSpec:
    """Parse ``key=value`` lines (``#`` starts a comment)."""
    types = {f.name: f.type for f in fields(SynthSpec)}
    kw: dict = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidValue(f"not a key=value line: {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise InvalidValue(f"unknown synth key {key!r}")
        kw[key] = _coerce(key, value, types[key])
    return SynthSpec(**kw)


def _coerce(key: str, value: str, typ: str):
    try:
        if key == "class_spectra":
            return tuple(tuple(float(x) for x in row.split(",")) for row in value.split(";") if row.strip())
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return value
    except ValueError:
        raise InvalidValue(f"bad value for {key}: {value!r}") from None


def format_spec(spec: SynthSpec) -> str:
    lines = []
    for f in fields(SynthSpec):
        v = getattr(spec, f.name)
        if f.name == "class_spectra":
            if not v:
                continue
            v = ";".join(",".join(repr(float(x)) for x in row) for row in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def load_spec(path: str | Path) -> SynthSpec:
    return parse_spec(Path(path).read_text())


def builtin_spec(name: str) -> SynthSpec:
    """One of the bundled specs: ``default``, ``subspace512``, ``hetero``."""
    try:
        text = resources.files("dfm").joinpath("configs").joinpath(f"{name}.cfg").read_text()
    except FileNotFoundError:
        raise InvalidValue(f"no built-in synth spec named {name!r}") from None
    return parse_spec(text)


@dataclass(frozen=True)
class SynthData:
    train: FeatureSet
    test_in: FeatureSet
    test_ood: FeatureSet
    basis: np.ndarray = field(repr=False)


def _orthogonal_unit(B: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    G = rng.standard_normal((n, B.shape[0]))
    G -= (G @ B) @ B.T
    G -= (G @ B) @ B.T  # second pass for orthogonality to working precision
    return G / np.linalg.norm(G, axis=1, keepdims=True)


def generate(spec: SynthSpec, holdout: bool = False) -> SynthData:
    """Draw train / in-distribution test / OOD test sets from ``spec``.

    With ``holdout=True`` the two test sets are replaced by an independent
    hold-out pair from the same geometry (same basis and class means), meant
    for hyper-parameter selection; train is unchanged.
    """
    seqs = np.random.SeedSequence(spec.seed).spawn(6)
    s_basis, s_train = seqs[0], seqs[1]
    s_test, s_ood = (seqs[4], seqs[5]) if holdout else (seqs[2], seqs[3])
    rb = np.random.default_rng(s_basis)
    B, _ = np.linalg.qr(rb.standard_normal((spec.D, spec.d)))
    means = spec.class_sep * rb.standard_normal((spec.N, spec.d))
    spectra = spec.spectra()
    sd = np.sqrt(spectra)

    def draw(n_per_class: int, rng: np.random.Generator) -> FeatureSet:
        labels = np.repeat(np.arange(spec.N), n_per_class)
        S = means[labels] + sd[labels] * rng.standard_normal((labels.size, spec.d))
        X = S @ B.T + spec.noise * rng.standard_normal((labels.size, spec.D))
        return FeatureSet(X, labels, spec.layer_id, spec.N)

    train = draw(spec.n_train, np.random.default_rng(s_train))
    test_in = draw(spec.n_test, np.random.default_rng(s_test))

    ro = np.random.default_rng(s_ood)
    k = np.arange(spec.n_ood) % spec.N
    if spec.ood_mode == "far_shift":
        S = means[k] + sd[k] * ro.standard_normal((spec.n_ood, spec.d))
        v = ro.standard_normal(spec.D)
        X = S @ B.T + spec.ood_shift * v / np.linalg.norm(v)
    else:
        pooled = np.sqrt(spectra.mean(axis=0))
        S = means[k] + spec.ood_scale * pooled * ro.standard_normal((spec.n_ood, spec.d))
        X = S @ B.T
        if spec.ood_mode == "off_subspace":
            X = X + spec.ood_offset * _orthogonal_unit(B, spec.n_ood, ro)
    X = X + spec.noise * ro.standard_normal((spec.n_ood, spec.D))
    test_ood = FeatureSet(X, None, spec.layer_id)
    return SynthData(train, test_in, test_ood, B)
