import json
import subprocess
import sys

import numpy as np
import pytest

from dfm.cli import main
from dfm.features import FeatureSet, save_features
from dfm.metrics import ScoreTable, read_metrics, read_score_table, write_score_table

SMALL = "D=24\nd=4\nN=3\nn_train=60\nn_test=30\nn_ood=60\nnoise=0.0\nood_offset=0.5\nseed=1\n"


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    d = tmp_path_factory.mktemp("bench")
    (d / "small.cfg").write_text(SMALL)
    assert main(["synth", str(d / "small.cfg"), "--out", str(d), "--holdout"]) == 0
    return d


def run(args, capsys):
    code = main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


def test_synth_outputs(bench):
    for name in ("train", "test_in", "test_ood", "holdout_in", "holdout_ood"):
        assert (bench / f"{name}.dfm").exists()
    assert (bench / "train.dfm.labels").exists() and not (bench / "test_ood.dfm.labels").exists()


def test_fit_score_eval(bench, tmp_path, capsys):
    code, out, _ = run(["fit", bench / "train.dfm", "--out", tmp_path / "m.dfmm", "--density", "separate_gaussian",
                        "--threads", 1], capsys)
    assert code == 0 and "pca dim=" in out and "retained=" in out
    for split in ("test_in", "test_ood"):
        assert run(["score", tmp_path / "m.dfmm", bench / f"{split}.dfm", "--out", tmp_path / f"{split}.csv"], capsys)[0] == 0
    table = read_score_table(tmp_path / "test_in.csv")
    assert table.names == ["mahal", "ll", "pes", "kll", "kpes"]
    assert all(np.all(np.isfinite(v)) for v in table.columns.values())
    code, out, _ = run(["eval", tmp_path / "test_in.csv", tmp_path / "test_ood.csv", "--out", tmp_path / "m.txt",
                        "--curves", tmp_path / "cur", "--hist", tmp_path / "hist", "--bins", 10], capsys)
    assert code == 0
    metrics = read_metrics(tmp_path / "m.txt")
    assert set(metrics) == {f"{c}.{k}" for c in table.names for k in ("auroc", "aupr")}
    assert metrics["pes.auroc"] == 1.0
    assert (tmp_path / "cur" / "pes.roc.csv").exists() and (tmp_path / "hist" / "ll.hist.csv").exists()


def test_score_single_sample(bench, tmp_path, capsys):
    run(["fit", bench / "train.dfm", "--out", tmp_path / "m.dfmm", "--families", "ll,pes"], capsys)
    from dfm.features import load_features

    one = load_features(bench / "test_in.dfm").take(np.array([0]))
    save_features(one, tmp_path / "one.dfm")
    code, _, _ = run(["score", tmp_path / "m.dfmm", tmp_path / "one.dfm", "--out", tmp_path / "o.csv"], capsys)
    t = read_score_table(tmp_path / "o.csv")
    assert code == 0 and len(t) == 1 and t.names == ["ll", "pes"]
    code, _, err = run(["score", tmp_path / "m.dfmm", tmp_path / "one.dfm", "--families", "kpes", "--out", tmp_path / "x.csv"], capsys)
    assert code == 3 and json.loads(err)["error"] == "MissingSection"


def test_eval_trivial_tables(tmp_path, capsys):
    write_score_table(ScoreTable({"a": np.array([3.0, 4.0]), "b": np.array([1.0, 2.0])}), tmp_path / "in.csv")
    write_score_table(ScoreTable({"a": np.array([0.0, 1.0]), "b": np.array([1.0, 2.0])}), tmp_path / "out.csv")
    assert run(["eval", tmp_path / "in.csv", tmp_path / "out.csv", "--out", tmp_path / "m.txt"], capsys)[0] == 0
    m = read_metrics(tmp_path / "m.txt")
    assert m["a.auroc"] == 1.0 and m["a.aupr"] == 1.0 and abs(m["b.auroc"] - 0.5) <= 1e-12
    assert run(["eval", tmp_path / "in.csv", tmp_path / "in.csv", "--out", tmp_path / "s.txt"], capsys)[0] == 0
    assert all(abs(v - 0.5) <= 1e-12 for k, v in read_metrics(tmp_path / "s.txt").items() if k.endswith("auroc"))


def test_eval_combiner(bench, tmp_path, capsys):
    run(["fit", bench / "train.dfm", "--out", tmp_path / "m.dfmm", "--families", "mahal,ll,pes"], capsys)
    for split in ("test_in", "test_ood", "holdout_in", "holdout_ood"):
        run(["score", tmp_path / "m.dfmm", bench / f"{split}.dfm", "--out", tmp_path / f"{split}.csv"], capsys)
    code, out, _ = run(["eval", tmp_path / "test_in.csv", tmp_path / "test_ood.csv", "--out", tmp_path / "m.txt",
                        "--combiner-in", tmp_path / "holdout_in.csv", "--combiner-out", tmp_path / "holdout_ood.csv"], capsys)
    assert code == 0 and "combined.auroc" in read_metrics(tmp_path / "m.txt")


def test_rank_report(tmp_path, capsys):
    (tmp_path / "z.cfg").write_text("D=512\nd=20\nN=4\nn_train=100\nn_test=10\nn_ood=10\nnoise=0\n")
    main(["synth", str(tmp_path / "z.cfg"), "--out", str(tmp_path)])
    capsys.readouterr()
    code, out, _ = run(["rank", tmp_path / "train.dfm", "--variances", "0.9,0.995"], capsys)
    rows = dict(line.rsplit(None, 1) for line in out.splitlines()[1:])
    assert code == 0 and rows["Dimension"] == "512" and rows["Rank"] == "20"
    assert int(rows["With 90% PCA"]) <= int(rows["With 99.5% PCA"])
    code, out, _ = run(["rank", tmp_path / "train.dfm", "--no-center"], capsys)
    assert code == 0 and "Rank" in out


def test_fit_deterministic_across_threads(bench, tmp_path, capsys):
    for t in (1, 3):
        run(["fit", bench / "train.dfm", "--out", tmp_path / f"m{t}.dfmm", "--seed", 7, "--threads", t,
             "--density", "gmm", "--k-max", 2], capsys)
    assert (tmp_path / "m1.dfmm").read_bytes() == (tmp_path / "m3.dfmm").read_bytes()


def test_config_file_and_flag_override(bench, tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("families=pes\nvariance=0.5\n")
    run(["fit", bench / "train.dfm", "--config", tmp_path / "c.cfg", "--variance", 0.999, "--out", tmp_path / "m.dfmm"], capsys)
    from dfm.container import load_models

    m = load_models(tmp_path / "m.dfmm")[0]
    assert m.config.variance == 0.999 and m.families == ["pes"]


def test_exit_codes(bench, tmp_path, capsys):
    save_features(FeatureSet(np.random.default_rng(0).standard_normal((10, 3))), tmp_path / "u.dfm")
    code, _, err = run(["fit", tmp_path / "u.dfm", "--mode", "per_class", "--out", tmp_path / "x.dfmm"], capsys)
    assert code == 3 and json.loads(err) == {
        "error": "LabelsRequired", "message": json.loads(err)["message"], "exit_code": 3}
    code, _, err = run(["fit"], capsys)
    assert code == 2 and json.loads(err)["error"] == "UsageError"
    code, _, err = run(["score", tmp_path / "missing.dfmm", tmp_path / "u.dfm", "--out", tmp_path / "s.csv"], capsys)
    assert code == 3
    save_features(FeatureSet(np.ones((4, 3))), tmp_path / "same.dfm")
    code, _, err = run(["fit", tmp_path / "same.dfm", "--families", "kll", "--out", tmp_path / "k.dfmm"], capsys)
    assert code == 4 and len(err.strip().splitlines()) == 1


def test_sweep_command(bench, tmp_path, capsys):
    (tmp_path / "g.txt").write_text("variance_fractions=0.5,0.995\nfamilies=ll,pes\ndensity_kinds=separate_gaussian\nmodes=global\n")
    code, out, _ = run(["sweep", bench / "train.dfm", bench / "holdout_in.dfm", bench / "holdout_ood.dfm",
                        "--grid", tmp_path / "g.txt", "--out", tmp_path / "s.csv", "--manifest", tmp_path / "man.cfg",
                        "--test-in", bench / "test_in.dfm", "--test-ood", bench / "test_ood.dfm"], capsys)
    assert code == 0 and "test auroc" in out
    assert (tmp_path / "s.csv").read_text().splitlines()[0].startswith("family,variance,mode")
    assert "ll.variance=0.995" in (tmp_path / "man.cfg").read_text()
    assert run(["fit", bench / "train.dfm", "--config", tmp_path / "man.cfg", "--out", tmp_path / "r.dfmm"], capsys)[0] == 0
    code, _, err = run(["sweep", bench / "train.dfm", bench / "train.dfm", bench / "holdout_ood.dfm",
                        "--out", tmp_path / "a", "--manifest", tmp_path / "b"], capsys)
    assert code == 3 and json.loads(err)["error"] == "Leakage"


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dfm.cli", "rank"], capture_output=True, text=True)
    assert proc.returncode == 2 and json.loads(proc.stderr)["exit_code"] == 2
