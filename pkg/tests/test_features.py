import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dfm.errors import DimensionMismatch, FormatError, InsufficientSamples, InvalidValue, LabelsRequired
from dfm.features import (
    FeatureSet,
    label_path_for,
    load_features,
    numerical_rank,
    read_matrix,
    save_features,
    split_per_class,
    subsample,
    write_matrix,
)


def test_binary_2x3_roundtrip(tmp_path):
    fs = FeatureSet(np.array([[1.0, 2, 3], [4, 5, 6]]))
    save_features(fs, tmp_path / "a.dfm")
    back = load_features(tmp_path / "a.dfm")
    assert back.n_samples == 2 and back.dim == 3
    assert np.array_equal(back.X, fs.X)


def test_header_layout(tmp_path):
    write_matrix(tmp_path / "h.dfm", np.array([[0.5]], dtype=np.float64))
    raw = (tmp_path / "h.dfm").read_bytes()
    assert raw[:4] == b"DFM1"
    version, rows, cols, dtype = struct.unpack("<IQQB", raw[4:25])
    assert (version, rows, cols, dtype) == (1, 1, 1, 1)
    assert struct.unpack("<d", raw[25:]) == (0.5,)


def test_csv_with_labels_file(tmp_path):
    (tmp_path / "x.csv").write_text("1.0,2.0\n3.0,4.0\n")
    (tmp_path / "y.txt").write_text("0\n1\n")
    fs = load_features(tmp_path / "x.csv", labels_path=tmp_path / "y.txt")
    assert (fs.n_samples, fs.dim, fs.class_count) == (2, 2, 2)
    assert fs.labels.tolist() == [0, 1]


def test_csv_header_and_label_col(tmp_path):
    (tmp_path / "x.csv").write_text("a,label,b\n1,0,2\n3,1,4\n5,1,6\n")
    fs = load_features(tmp_path / "x.csv", label_col=1)
    assert fs.X.tolist() == [[1, 2], [3, 4], [5, 6]]
    assert fs.labels.tolist() == [0, 1, 1]


def test_nan_rejected(tmp_path):
    (tmp_path / "x.csv").write_text("1.0,nan\n3.0,4.0\n")
    with pytest.raises(InvalidValue):
        load_features(tmp_path / "x.csv")
    with pytest.raises(InvalidValue):
        FeatureSet(np.array([[np.inf]]))


def test_bad_magic(tmp_path):
    (tmp_path / "bad.dfm").write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(FormatError):
        read_matrix(tmp_path / "bad.dfm")


def test_truncated_payload(tmp_path):
    write_matrix(tmp_path / "t.dfm", np.ones((3, 3)))
    raw = (tmp_path / "t.dfm").read_bytes()
    (tmp_path / "t.dfm").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        read_matrix(tmp_path / "t.dfm")


def test_label_count_mismatch(tmp_path):
    save_features(FeatureSet(np.ones((3, 2)), np.array([0, 1, 0])), tmp_path / "a.dfm")
    write_matrix(tmp_path / "short.labels", np.array([[0], [1]], dtype=np.int32))
    with pytest.raises(DimensionMismatch):
        load_features(tmp_path / "a.dfm", labels_path=tmp_path / "short.labels")


def test_single_value_and_f32(tmp_path):
    fs = FeatureSet(np.array([[0.5]]))
    save_features(fs, tmp_path / "one.dfm")
    assert load_features(tmp_path / "one.dfm") == FeatureSet(np.array([[0.5]]), layer_id="one")
    X32 = np.array([[1.5, -2.25]], dtype=np.float32)
    write_matrix(tmp_path / "f.dfm", X32)
    back = read_matrix(tmp_path / "f.dfm")
    assert back.dtype == np.float32 and np.array_equal(back, X32)


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        save_features(FeatureSet(np.ones((1, 1))), tmp_path / "missing" / "dir" / "x.dfm")


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6),
                  elements=st.floats(allow_nan=False, allow_infinity=False, width=64)))
def test_binary_roundtrip_bit_exact(X):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        labels = np.arange(X.shape[0]) % 2
        fs = FeatureSet(X, labels, layer_id="p")
        save_features(fs, Path(d) / "p.dfm")
        back = load_features(Path(d) / "p.dfm", labels_path=label_path_for(Path(d) / "p.dfm"))
        assert back.X.tobytes() == X.tobytes()
        assert np.array_equal(back.labels, labels)


def test_split_per_class():
    X = np.arange(8.0).reshape(4, 2)
    groups = dict(split_per_class(FeatureSet(X, np.array([0, 1, 0, 1]))))
    assert np.array_equal(groups[0], X[[0, 2]])
    assert np.array_equal(groups[1], X[[1, 3]])
    single = split_per_class(FeatureSet(X, np.zeros(4, int)))
    assert len(single) == 1 and np.array_equal(single[0][1], X)
    with pytest.raises(LabelsRequired):
        split_per_class(FeatureSet(X))


def test_subsample_counts_and_determinism(rng):
    fs = FeatureSet(rng.standard_normal((100, 3)), np.repeat([0, 1], 50))
    assert subsample(fs, 1.0, seed=3) is fs
    a = subsample(fs, 0.2, seed=7)
    assert np.bincount(a.labels).tolist() == [10, 10]
    assert a == subsample(fs, 0.2, seed=7)
    with pytest.raises(InsufficientSamples):
        subsample(fs, 0.02, seed=0)
    with pytest.raises(InvalidValue):
        subsample(fs, 0.0, seed=0)


def test_rank_one_outer_product():
    u = np.array([1.0, -2, 3, 0.5])
    v = np.array([2.0, 1, -1])
    X = np.outer(u, v) + np.array([5.0, 6, 7])
    assert numerical_rank(X).rank == 1


def test_rank_gaussian_full(rng):
    X = rng.standard_normal((100, 50))
    s = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    assert numerical_rank(X).rank == int(np.sum(s > 1e-6 * s[0])) == 50


def test_pca_dim_at_matches_cumulative_ratio(rng):
    X = rng.standard_normal((200, 10)) * np.array([10, 5, 2, 1, 1, 1, 1, 1, 1, 1.0])
    rep = numerical_rank(X, variances=(0.5, 0.9, 0.995))
    ev = np.linalg.eigvalsh(np.cov(X.T))[::-1]
    ratio = np.cumsum(ev) / ev.sum()
    for v, m in rep.pca_dim_at.items():
        assert m == int(np.argmax(ratio >= v)) + 1


def test_no_center_option():
    X = np.ones((5, 3)) * np.array([1.0, 2, 3])
    assert numerical_rank(X, center=False).rank == 1
    assert numerical_rank(X, center=True).rank == 0


@given(st.integers(2, 30), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_rank_properties(M, D, seed):
    r = np.random.default_rng(seed)
    X = r.standard_normal((M, D)) @ r.standard_normal((D, D)) * r.uniform(0.1, 10)
    rep = numerical_rank(X)
    assert rep.rank <= min(M, D)
    dims = [rep.pca_dim_at[v] for v in sorted(rep.pca_dim_at)]
    assert dims == sorted(dims) and all(m <= rep.rank for m in dims)
    perm = r.permutation(M)
    assert numerical_rank(X[perm]).rank == rep.rank
    assert numerical_rank(np.vstack([X, X[:3]])).rank == rep.rank


@given(st.integers(0, 2**31 - 1), st.floats(0.2, 1.0))
def test_subsample_rank_never_exceeds_full(seed, frac):
    r = np.random.default_rng(seed)
    X = r.standard_normal((40, 3)) @ r.standard_normal((3, 12))
    fs = FeatureSet(X, np.repeat([0, 1], 20))
    sub = subsample(fs, frac, seed)
    assert numerical_rank(sub.X).rank <= numerical_rank(X).rank
