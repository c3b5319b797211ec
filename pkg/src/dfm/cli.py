"""``dfm`` command-line front end.

Subcommands: ``synth``, ``fit``, ``score``, ``eval``, ``rank``, ``sweep``.
Failures print one JSON object on stderr and exit with 2 (usage), 3 (data)
or 4 (numerical).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .container import load_models, save_models
from .errors import DFMError, EXIT_DATA, EXIT_USAGE, LeakageError, UsageError
from .features import DEFAULT_VARIANCES, FeatureSet, label_path_for, load_features, numerical_rank, save_features
from .metrics import (
    ScoreTable,
    evaluate,
    export_histograms,
    fit_logistic_combiner,
    read_score_table,
    write_curves,
    write_histogram,
    write_metrics,
    write_score_table,
)
from .pipeline import DetectorConfig, apply_settings, fit_layer, parse_config, score_layer, summarize
from .synth import builtin_spec, format_spec, generate, load_spec
from .tuning import GridSpec, check_disjoint, holdout_report, manifest_text, parse_grid, sweep, write_sweep_csv

log = logging.getLogger("dfm")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D401
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# shared option groups


def _add_features(p: argparse.ArgumentParser, name: str = "features") -> None:
    p.add_argument(name, help="feature file (DFM1 binary or .csv)")
    p.add_argument("--labels", help="labels file (default: <features>.labels if present)")
    p.add_argument("--label-col", type=int, help="CSV column holding integer labels")
    p.add_argument("--format", choices=("binary", "csv"), help="override format detection")
    p.add_argument("--layer-id", help="layer tag (default: file stem)")


def _read(path: str, args, labels: str | None = None, layer_id: str | None = None) -> FeatureSet:
    lp = labels
    if lp is None and args.label_col is None:
        guess = label_path_for(path)
        if guess.exists():
            lp = str(guess)
    return load_features(path, args.format, lp, args.label_col, layer_id)


# config flags: (flag, config key, type)
_CONFIG_FLAGS = (
    ("--families", "families", str),
    ("--variance", "variance", float),
    ("--n-components", "n_components", int),
    ("--mode", "mode", str),
    ("--density", "density", str),
    ("--reg", "reg", float),
    ("--k-max", "k_max", int),
    ("--restarts", "restarts", int),
    ("--gamma", "gamma", float),
    ("--gamma-mult", "gamma_mult", float),
    ("--kernel-level", "kernel_level", float),
    ("--kernel-dim", "kernel_dim", int),
    ("--max-anchors", "max_anchors", int),
    ("--preimage-iter", "preimage_iter", int),
    ("--preimage-tol", "preimage_tol", float),
)


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value detector config (e.g. a sweep manifest)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="extra setting, e.g. pes.mode=per_class (repeatable)")
    for flag, key, typ in _CONFIG_FLAGS:
        p.add_argument(flag, dest=f"cfg_{key}", type=typ)


def _config(args) -> DetectorConfig:
    cfg = parse_config(Path(args.config).read_text()) if args.config else DetectorConfig()
    items = []
    for s in args.set:
        if "=" not in s:
            raise UsageError(f"--set expects KEY=VALUE, got {s!r}")
        items.append(tuple(s.split("=", 1)))
    for _, key, _ in _CONFIG_FLAGS:
        v = getattr(args, f"cfg_{key}")
        if v is not None:
            items.append((key, str(v)))
    if args.seed is not None:
        items.append(("seed", str(args.seed)))
    return apply_settings(cfg, items)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    p = Path(args.spec)
    spec = load_spec(p) if p.is_file() else builtin_spec(args.spec)
    if args.seed is not None:
        from dataclasses import replace

        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = generate(spec)
    save_features(data.train, out / "train.dfm")
    save_features(data.test_in, out / "test_in.dfm")
    save_features(data.test_ood, out / "test_ood.dfm")
    written = ["train.dfm", "test_in.dfm", "test_ood.dfm"]
    if args.holdout:
        h = generate(spec, holdout=True)
        save_features(h.test_in, out / "holdout_in.dfm")
        save_features(h.test_ood, out / "holdout_ood.dfm")
        written += ["holdout_in.dfm", "holdout_ood.dfm"]
    (out / "spec.cfg").write_text(format_spec(spec))
    for name in written:
        print(out / name)
    return 0


def cmd_fit(args) -> int:
    cfg = _config(args)
    fs = _read(args.features, args, args.labels, args.layer_id)
    model = fit_layer(fs, cfg, args.threads)
    tuning = Path(args.config).read_text() if args.config else None
    save_models([model], args.out, tuning=tuning)
    for line in summarize(model):
        print(line)
    print(f"wrote {args.out}")
    return 0


def cmd_score(args) -> int:
    models = load_models(args.model)
    if args.layer:
        models = [m for m in models if m.layer_id == args.layer]
        if not models:
            raise UsageError(f"model has no layer {args.layer!r}")
    elif len(models) > 1:
        raise UsageError("model holds several layers; pick one with --layer")
    model = models[0]
    fs = _read(args.features, args, args.labels)
    families = args.families.split(",") if args.families else None
    cols = score_layer(model, fs.X, families, args.threads)
    member = None
    if args.membership:
        member = np.full(fs.n_samples, 1 if args.membership == "in" else 0, dtype=np.int64)
    write_score_table(ScoreTable(cols, member), args.out)
    print(f"wrote {args.out} ({fs.n_samples} rows, columns {','.join(cols)})")
    return 0


def cmd_eval(args) -> int:
    table = ScoreTable.combine(read_score_table(args.scores_in), read_score_table(args.scores_out))
    if args.combiner_in or args.combiner_out:
        if not (args.combiner_in and args.combiner_out):
            raise UsageError("--combiner-in and --combiner-out go together")
        held = ScoreTable.combine(read_score_table(args.combiner_in), read_score_table(args.combiner_out))
        comb = fit_logistic_combiner(held, table.names)
        cols = dict(table.columns)
        cols["combined"] = comb.decision(table)
        table = ScoreTable(cols, table.membership, table.sample_ids)
        if not comb.converged:
            log.warning("combiner did not converge in %d iterations", comb.iterations)
    results = evaluate(table)
    write_metrics(results, args.out)
    if args.curves:
        d = Path(args.curves)
        d.mkdir(parents=True, exist_ok=True)
        for c, r in results.items():
            write_curves(r, d / f"{c}.roc.csv", d / f"{c}.pr.csv")
    if args.hist:
        d = Path(args.hist)
        d.mkdir(parents=True, exist_ok=True)
        for c in table.names:
            write_histogram(export_histograms(table, c, args.bins), d / f"{c}.hist.csv")
    for c, r in results.items():
        print(f"{c}: auroc={r.auroc:.6f} aupr={r.aupr:.6f}")
    return 0


def cmd_rank(args) -> int:
    fs = _read(args.features, args, args.labels)
    variances = _floats(args.variances)
    rep = numerical_rank(fs.X, args.tol, variances, center=not args.no_center)
    rows = [("Dimension", rep.dim), ("Rank", rep.rank)]
    rows += [(f"With {v * 100:g}% PCA", m) for v, m in rep.pca_dim_at.items()]
    width = max(len(r[0]) for r in rows)
    print(f"{'':<{width}}  {fs.layer_id}")
    for name, value in rows:
        print(f"{name:<{width}}  {value}")
    return 0


def cmd_sweep(args) -> int:
    paths = [args.train, args.holdout_in, args.holdout_ood] + [p for p in (args.test_in, args.test_ood) if p]
    resolved = [Path(p).resolve() for p in paths]
    if len(set(resolved)) != len(resolved):
        raise LeakageError("train, hold-out and test sets must be distinct files")
    cfg = _config(args)
    grid = parse_grid(Path(args.grid).read_text()) if args.grid else GridSpec()
    train = _read(args.train, args)
    h_in = _read(args.holdout_in, args)
    h_ood = _read(args.holdout_ood, args)
    result = sweep(train, h_in, h_ood, grid, cfg, args.threads)
    write_sweep_csv(result, args.out)
    manifest = manifest_text(result)
    Path(args.manifest).write_text(manifest)
    for fam, p in result.selected.items():
        print(f"{fam}: holdout auroc={p.auroc:.6f} reduced_dim={p.reduced_dim}")
    if args.test_in or args.test_ood:
        if not (args.test_in and args.test_ood):
            raise UsageError("--test-in and --test-ood go together")
        t_in, t_ood = _read(args.test_in, args), _read(args.test_ood, args)
        check_disjoint(h_in, t_in)
        report = holdout_report(result, train, t_in, t_ood, [h_in, h_ood], args.threads)
        for fam, (a, b) in report.items():
            print(f"{fam}: test auroc={a:.6f} aupr={b:.6f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="dfm", description="Subspace and density confidence scores for OOD detection.")
    top.add_argument("--version", action="version", version=f"dfm {__version__}")
    top.add_argument("-v", "--verbose", action="store_true")
    sub = top.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("spec", help="spec file or built-in name (default, subspace512, subspace512_noisy, hetero)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--holdout", action="store_true", help="also write a hold-out in/OOD pair")
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("fit", help="fit detectors on training features")
    _add_features(p)
    _add_config(p)
    p.add_argument("--out", required=True, help="model container to write")
    common(p)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("score", help="score features with a fitted model")
    p.add_argument("model")
    _add_features(p)
    p.add_argument("--layer", help="layer to use when the container has several")
    p.add_argument("--families", help="comma-separated subset of score families")
    p.add_argument("--membership", choices=("in", "out"), help="tag every row as in-distribution or OOD")
    p.add_argument("--out", required=True, help="score table CSV to write")
    common(p)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("eval", help="AUROC/AUPR from in-distribution and OOD score tables")
    p.add_argument("scores_in")
    p.add_argument("scores_out")
    p.add_argument("--out", required=True, help="metrics file to write")
    p.add_argument("--curves", help="directory for ROC/PR curve CSVs")
    p.add_argument("--hist", help="directory for score histogram CSVs")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--combiner-in", help="held-out in-distribution table for the logistic combiner")
    p.add_argument("--combiner-out", help="held-out OOD table for the logistic combiner")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("rank", help="numerical rank and PCA dimensions of a feature matrix")
    _add_features(p)
    p.add_argument("--tol", type=float, default=1e-6, help="relative singular value tolerance")
    p.add_argument("--variances", default=",".join(str(v) for v in DEFAULT_VARIANCES))
    p.add_argument("--no-center", action="store_true", help="skip column-mean removal")
    common(p)
    p.set_defaults(fn=cmd_rank)

    p = sub.add_parser("sweep", help="hold-out hyper-parameter selection")
    p.add_argument("train")
    p.add_argument("holdout_in")
    p.add_argument("holdout_ood")
    p.add_argument("--label-col", type=int)
    p.add_argument("--format", choices=("binary", "csv"))
    p.add_argument("--grid", help="grid file (key=v1,v2,... lines)")
    _add_config(p)
    p.add_argument("--out", required=True, help="sweep CSV to write")
    p.add_argument("--manifest", required=True, help="selected-config manifest to write")
    p.add_argument("--test-in", help="test in-distribution set for a final disjoint evaluation")
    p.add_argument("--test-ood", help="test OOD set for a final disjoint evaluation")
    common(p)
    p.set_defaults(fn=cmd_sweep)
    return top


def _fail(code: str, message: str, exit_code: int) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": message, "exit_code": exit_code}) + "\n")
    return exit_code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        # BLAS stays single-threaded so results do not depend on --threads
        with threadpool_limits(limits=1):
            return args.fn(args)
    except DFMError as exc:
        return _fail(exc.code, str(exc), exc.exit_code)
    except OSError as exc:
        return _fail("IOError", str(exc), EXIT_DATA)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0) if isinstance(exc.code, int) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
