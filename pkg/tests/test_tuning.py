import numpy as np
import pytest

from dfm.errors import DimensionMismatch, FitFailed, InvalidValue, LeakageError
from dfm.features import FeatureSet
from dfm.pipeline import DetectorConfig, fit_layer, parse_config, score_layer
from dfm.metrics import auroc
from dfm.synth import SynthSpec, generate
from dfm.tuning import (
    GridPoint,
    GridSpec,
    _select,
    check_disjoint,
    holdout_report,
    manifest_text,
    parse_grid,
    sweep,
    write_sweep_csv,
)

SPEC = SynthSpec(D=60, d=20, N=3, n_train=120, n_test=60, n_ood=150, noise=0.01, ood_offset=0.5, seed=4)


@pytest.fixture(scope="module")
def bench():
    return generate(SPEC), generate(SPEC, holdout=True)


def test_grid_validation():
    with pytest.raises(InvalidValue):
        GridSpec(variance_fractions=())
    with pytest.raises(InvalidValue):
        GridSpec(density_kinds=("mystery",))
    with pytest.raises(InvalidValue):
        GridSpec(kernel_levels=(2.5,))
    g = parse_grid("variance_fractions=0.5,0.9\nkernel_levels=0.9,12\nmodes=global\n")
    assert g.variance_fractions == (0.5, 0.9) and g.kernel_levels == (0.9, 12.0)
    with pytest.raises(InvalidValue):
        parse_grid("colour=1\n")


def test_single_point_selected(bench):
    data, hold = bench
    grid = GridSpec(variance_fractions=(0.9,), density_kinds=("separate_gaussian",), modes=("global",), families=("ll",))
    res = sweep(data.train, hold.test_in, hold.test_ood, grid)
    assert len(res.points) == 1 and res.selected["ll"] is res.points[0]


def test_higher_variance_wins_for_ll(bench):
    data, hold = bench
    grid = GridSpec(variance_fractions=(0.5, 0.995), density_kinds=("separate_gaussian",), families=("ll",))
    res = sweep(data.train, hold.test_in, hold.test_ood, grid)
    by_v = {p.variance: p.auroc for p in res.points}
    assert by_v[0.995] > by_v[0.5]
    assert res.selected["ll"].variance == 0.995


def test_tie_rule():
    a = GridPoint("pes", variance=0.99, reduced_dim=9, auroc=0.9)
    b = GridPoint("pes", variance=0.9, reduced_dim=5, auroc=0.9 - 5e-13)
    c = GridPoint("pes", variance=0.5, reduced_dim=2, auroc=0.8)
    assert _select([a, b, c]) is b
    g1 = GridPoint("kpes", reduced_dim=5, gamma=0.2, auroc=1.0)
    g2 = GridPoint("kpes", reduced_dim=5, gamma=0.1, auroc=1.0)
    assert _select([g1, g2]) is g2
    assert _select([GridPoint("ll", status="SingularCovariance")]) is None


def test_sweep_deterministic_and_replayable(bench, tmp_path):
    data, hold = bench
    grid = GridSpec(variance_fractions=(0.9, 0.99), gamma_multipliers=(0.5, 1.0), kernel_levels=(0.9,),
                    density_kinds=("separate_gaussian",), modes=("global", "per_class"))
    a = sweep(data.train, hold.test_in, hold.test_ood, grid)
    b = sweep(data.train, hold.test_in, hold.test_ood, grid)
    write_sweep_csv(a, tmp_path / "a.csv")
    write_sweep_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert manifest_text(a) == manifest_text(b)

    cfg = parse_config(manifest_text(a))
    model = fit_layer(data.train, cfg)
    s_in, s_out = score_layer(model, hold.test_in.X), score_layer(model, hold.test_ood.X)
    for fam, p in a.selected.items():
        assert auroc(s_in[fam], s_out[fam]) == p.auroc
        best = max(q.auroc for q in a.points if q.family == fam and q.status == "ok")
        assert p.auroc == best


def test_failures_recorded(bench, monkeypatch):
    data, hold = bench
    import dfm.tuning as tuning
    from dfm.errors import SingularCovariance

    real = tuning.dens.fit_class_conditional

    def flaky(groups, kind, *a, **k):
        if kind == "gmm":
            raise SingularCovariance("boom")
        return real(groups, kind, *a, **k)

    monkeypatch.setattr(tuning.dens, "fit_class_conditional", flaky)
    grid = GridSpec(variance_fractions=(0.9,), families=("ll",))
    res = sweep(data.train, hold.test_in, hold.test_ood, grid)
    status = {p.density: p.status for p in res.points}
    assert status == {"separate_gaussian": "ok", "gmm": "SingularCovariance"}

    monkeypatch.setattr(tuning.dens, "fit_class_conditional", lambda *a, **k: (_ for _ in ()).throw(SingularCovariance("x")))
    with pytest.raises(FitFailed):
        sweep(data.train, hold.test_in, hold.test_ood, GridSpec(families=("ll",)))


def test_preconditions_and_leakage(bench):
    data, hold = bench
    with pytest.raises(DimensionMismatch):
        sweep(data.train, FeatureSet(np.ones((3, 2))), hold.test_ood)
    with pytest.raises(LeakageError):
        sweep(data.train, hold.test_in, data.train)
    with pytest.raises(LeakageError):
        check_disjoint(hold.test_in, hold.test_in.take(np.array([0])))
    check_disjoint(hold.test_in, data.test_in)


def test_holdout_report_rejects_overlap(bench):
    data, hold = bench
    grid = GridSpec(variance_fractions=(0.9,), density_kinds=("separate_gaussian",), modes=("global",), families=("pes",))
    res = sweep(data.train, hold.test_in, hold.test_ood, grid)
    out = holdout_report(res, data.train, data.test_in, data.test_ood, [hold.test_in, hold.test_ood])
    assert set(out) == {"pes"}
    with pytest.raises(LeakageError):
        holdout_report(res, data.train, hold.test_in, data.test_ood, [hold.test_in, hold.test_ood])


def test_selected_config_is_valid_detector_config(bench):
    data, hold = bench
    grid = GridSpec(variance_fractions=(0.9,), gamma_multipliers=(1.0,), kernel_levels=(5,),
                    density_kinds=("separate_gaussian",), modes=("global",), families=("kll",))
    res = sweep(data.train, hold.test_in, hold.test_ood, grid)
    cfg = res.selected_config()
    assert isinstance(cfg, DetectorConfig) and cfg.resolve("kll").kernel_dim == 5
    assert res.selected["kll"].reduced_dim == 5
