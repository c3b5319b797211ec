"""DFMM model container.

Layout (little-endian)::

    magic     4 bytes  b"DFMM"
    version   u32      1
    count     u32      number of sections
    table     count entries of
                  kind      u16 length + utf-8
                  layer_id  u16 length + utf-8
                  name      u16 length + utf-8
                  offset    u64  absolute byte offset of the payload
                  length    u64  payload size in bytes
    payloads  concatenated in table order

A payload is a record: u32 field count, then per field a u16-length utf-8
name, a u8 type (0 = f64 array, 1 = utf-8 text) and either ``u8 ndim``,
``ndim x u64`` shape and the f64 values, or ``u32 length`` and the text.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import density as dens
from . import kernel as kern
from . import linear as lin
from .errors import FormatError, MissingSection
from .pipeline import LayerModel, parse_config

MAGIC = b"DFMM"
VERSION = 1
_F64 = np.dtype("<f8")

Record = Mapping[str, "np.ndarray | str"]


@dataclass(frozen=True)
class Section:
    kind: str
    layer_id: str
    name: str
    fields: dict


def _pack_str(s: str, width: str = "<H") -> bytes:
    b = s.encode("utf-8")
    return struct.pack(width, len(b)) + b


def encode_record(rec: Record) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(rec)))
    for name, value in rec.items():
        out.write(_pack_str(name))
        if isinstance(value, str):
            out.write(struct.pack("<B", 1))
            out.write(_pack_str(value, "<I"))
        else:
            a = np.asarray(value, dtype=np.float64)
            out.write(struct.pack("<BB", 0, a.ndim))
            out.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            out.write(np.ascontiguousarray(a, dtype=_F64).tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0, end: int | None = None):
        self.buf, self.pos = buf, pos
        self.end = len(buf) if end is None else end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise FormatError("model container is truncated")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, width: str = "<H") -> str:
        (n,) = self.unpack(width)
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("bad utf-8 in model container") from None


def decode_record(buf: bytes, start: int, end: int) -> dict:
    r = _Reader(buf, start, end)
    (n,) = r.unpack("<I")
    rec = {}
    for _ in range(n):
        name = r.string()
        (typ,) = r.unpack("<B")
        if typ == 1:
            rec[name] = r.string("<I")
        elif typ == 0:
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}Q") if ndim else ()
            count = int(np.prod(shape)) if ndim else 1
            a = np.frombuffer(r.take(count * 8), dtype=_F64).reshape(shape)
            rec[name] = a.astype(np.float64)
        else:
            raise FormatError(f"unknown field type {typ}")
    if r.pos != end:
        raise FormatError("section payload has trailing bytes")
    return rec


def write_container(sections: list[Section], path: str | Path | None = None) -> bytes:
    payloads = [encode_record(s.fields) for s in sections]
    table_size = sum(
        2 * 3 + len(s.kind.encode()) + len(s.layer_id.encode()) + len(s.name.encode()) + 16 for s in sections
    )
    offset = 12 + table_size
    head = io.BytesIO()
    head.write(MAGIC + struct.pack("<II", VERSION, len(sections)))
    for s, p in zip(sections, payloads):
        head.write(_pack_str(s.kind) + _pack_str(s.layer_id) + _pack_str(s.name))
        head.write(struct.pack("<QQ", offset, len(p)))
        offset += len(p)
    blob = head.getvalue() + b"".join(payloads)
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


def read_container(source: str | Path | bytes) -> list[Section]:
    buf = source if isinstance(source, bytes) else Path(source).read_bytes()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("not a DFMM model container")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    entries = []
    for _ in range(count):
        kind, layer, name = r.string(), r.string(), r.string()
        off, length = r.unpack("<QQ")
        entries.append((kind, layer, name, off, length))
    table_end = r.pos
    spans = sorted((off, off + length) for *_, off, length in entries)
    prev = table_end
    for a, b in spans:
        if a < prev or b > len(buf):
            raise FormatError("section table offsets overlap or run past the end")
        prev = b
    return [Section(k, lay, n, decode_record(buf, off, off + length)) for k, lay, n, off, length in entries]


# ---------------------------------------------------------------------------
# model <-> sections


def _linear_fields(S: lin.LinearSubspace) -> dict:
    return {
        "mean": S.mean,
        "components": S.components,
        "spectrum": S.spectrum,
        "variance_retained": np.float64(S.variance_retained),
        "total_variance": np.float64(S.total_variance),
    }


def _linear_from(f: dict) -> lin.LinearSubspace:
    D = f["mean"].shape[0]
    return lin.LinearSubspace(
        f["mean"], f["components"].reshape(-1, D), f["spectrum"],
        float(f["variance_retained"]), float(f["total_variance"]),
    )


def _kernel_fields(K: kern.KernelSubspace) -> dict:
    return {
        "kernel": K.kernel,
        "anchors": K.anchors,
        "gamma": np.float64(K.gamma),
        "alphas": K.alphas,
        "eigvals": K.eigvals,
        "gram_row_means": K.gram_row_means,
        "gram_total_mean": np.float64(K.gram_total_mean),
        "eig_total": np.float64(K.eig_total),
        "seed": np.float64(K.seed),
    }


def _kernel_from(f: dict) -> kern.KernelSubspace:
    m = f["anchors"].shape[0]
    return kern.KernelSubspace(
        anchors=f["anchors"], gamma=float(f["gamma"]), alphas=f["alphas"].reshape(-1, m),
        eigvals=f["eigvals"], gram_row_means=f["gram_row_means"],
        gram_total_mean=float(f["gram_total_mean"]), seed=int(f["seed"]),
        kernel=f["kernel"], eig_total=float(f["eig_total"]),
    )


def _density_fields(model: dens.ClassConditionalModel) -> dict:
    rec: dict = {"kind": model.kind, "reg": np.float64(model.reg), "classes": np.array(model.classes, float)}
    if model.kind == "shared_gaussian":
        first = next(iter(model.per_class.values())).components[0]
        rec["shared_covariance"] = first.covariance
    for k, m in model.per_class.items():
        rec[f"c{k}.weights"] = m.weights
        rec[f"c{k}.means"] = np.array([c.mean for c in m.components])
        if model.kind != "shared_gaussian":
            rec[f"c{k}.covariances"] = np.array([c.covariance for c in m.components])
        rec[f"c{k}.selected_k"] = np.float64(m.selected_k)
        rec[f"c{k}.loglik"] = np.float64(m.loglik)
        rec[f"c{k}.bic"] = np.array([[j, b] for j, b in m.bic.items()], float).reshape(-1, 2)
    return rec


def _density_from(f: dict) -> dens.ClassConditionalModel:
    kind = f["kind"]
    per_class = {}
    shared = None
    if kind == "shared_gaussian":
        cov = f["shared_covariance"]
        shared = dens.GaussianComponent.from_moments(np.zeros(cov.shape[0]), cov)
    for k in (int(c) for c in np.atleast_1d(f["classes"])):
        means = f[f"c{k}.means"]
        if shared is not None:
            comps = [dens.GaussianComponent(means[0], shared.covariance, shared.chol, shared.logdet)]
        else:
            covs = f[f"c{k}.covariances"]
            comps = [dens.GaussianComponent.from_moments(mu, C) for mu, C in zip(means, covs)]
        bic = {int(j): float(b) for j, b in f[f"c{k}.bic"]}
        per_class[k] = dens.MixtureDensity(
            f[f"c{k}.weights"], comps, int(f[f"c{k}.selected_k"]), float(f[f"c{k}.loglik"]), bic
        )
    return dens.ClassConditionalModel(kind, per_class, float(f["reg"]))


def model_sections(model: LayerModel) -> list[Section]:
    L = model.layer_id
    out = [Section("config", L, "config", {"text": model.config.to_text(), "dim": np.float64(model.dim)})]
    if model.mahal is not None:
        out.append(Section("density", L, "mahal.density", _density_fields(model.mahal)))
    if model.ll_density is not None:
        out.append(Section("subspace", L, "ll.subspace", _linear_fields(model.ll_subspace)))
        out.append(Section("density", L, "ll.density", _density_fields(model.ll_density)))
    if model.pes is not None:
        out.append(Section("bundle", L, "pes.bundle", {"mode": model.pes.mode, "classes": np.array(list(model.pes.models), float)}))
        for k, S in model.pes.models.items():
            out.append(Section("subspace", L, f"pes.subspace.{k}", _linear_fields(S)))
    if model.kll_density is not None:
        out.append(Section("kernel", L, "kll.kernel", _kernel_fields(model.kll_subspace)))
        out.append(Section("density", L, "kll.density", _density_fields(model.kll_density)))
    if model.kpes is not None:
        out.append(Section("bundle", L, "kpes.bundle", {"mode": model.kpes.mode, "classes": np.array(list(model.kpes.models), float)}))
        for k, K in model.kpes.models.items():
            out.append(Section("kernel", L, f"kpes.kernel.{k}", _kernel_fields(K)))
    return out


def models_from_sections(sections: list[Section]) -> list[LayerModel]:
    by_layer: dict[str, dict[str, dict]] = {}
    for s in sections:
        if s.kind == "tuning":
            continue
        by_layer.setdefault(s.layer_id, {})[s.name] = s.fields
    models = []
    for layer, secs in by_layer.items():
        if "config" not in secs:
            raise MissingSection(f"layer {layer}: no config section")
        cfg = parse_config(secs["config"]["text"])
        m = LayerModel(layer, int(secs["config"]["dim"]), cfg)
        if "mahal.density" in secs:
            m.mahal = _density_from(secs["mahal.density"])
        if "ll.density" in secs:
            m.ll_subspace = _linear_from(secs["ll.subspace"])
            m.ll_density = _density_from(secs["ll.density"])
        if "pes.bundle" in secs:
            b = secs["pes.bundle"]
            ks = [int(k) for k in np.atleast_1d(b["classes"])]
            m.pes = lin.SubspaceBundle(b["mode"], {k: _linear_from(secs[f"pes.subspace.{k}"]) for k in ks})
        if "kll.density" in secs:
            m.kll_subspace = _kernel_from(secs["kll.kernel"])
            m.kll_density = _density_from(secs["kll.density"])
        if "kpes.bundle" in secs:
            b = secs["kpes.bundle"]
            ks = [int(k) for k in np.atleast_1d(b["classes"])]
            m.kpes = kern.KernelBundle(b["mode"], {k: _kernel_from(secs[f"kpes.kernel.{k}"]) for k in ks})
        models.append(m)
    return models


def save_models(models: list[LayerModel], path: str | Path, tuning: str | None = None) -> bytes:
    sections = [s for m in models for s in model_sections(m)]
    if tuning is not None:
        sections.append(Section("tuning", "", "manifest", {"text": tuning}))
    return write_container(sections, path)


def load_models(path: str | Path) -> list[LayerModel]:
    return models_from_sections(read_container(path))
