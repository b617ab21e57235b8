import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridshield.evaluate import (DatasetMetrics, build_report, emit_report, mae,
                                 parse_report, perturb_inputs, report_csv,
                                 scaled_perturbation_eval)
from gridshield.pinn.model import init_params
from gridshield.powerflow import SnapshotSet


def _data(n=6, n_bus=4, seed=0):
    r = np.random.default_rng(seed)
    return SnapshotSet(P=r.normal(size=(n, n_bus)), Q=r.normal(size=(n, n_bus)),
                       V=r.uniform(0.95, 1.05, (n, n_bus)), theta=r.normal(0, 0.1, (n, n_bus)))


def _oracle(data, dv=0.0, dt=0.0):
    """Model that returns the labels of ``data`` (rows matched by input) plus offsets."""
    lookup = {row.tobytes(): k for k, row in enumerate(data.inputs)}

    def model(inputs):
        idx = [lookup[row.tobytes()] for row in np.asarray(inputs)]
        return data.V[idx] + dv, data.theta[idx] + dt
    return model


def test_perfect_model_zero():
    d = _data()
    m = mae(_oracle(d), d)
    assert all(getattr(m, f) == 0.0 for f in ("mae_v", "mae_theta", "mae_overall",
                                              "mae95_v", "mae99_theta"))


def test_constant_offset_on_v():
    d = _data()
    m = mae(_oracle(d, dv=0.01), d)
    assert m.mae_v == pytest.approx(0.01, abs=1e-15)
    assert m.mae_theta == 0.0
    assert m.mae_overall == pytest.approx(0.005, abs=1e-15)


def test_percentile_linear_interpolation():
    d = _data(n=4, n_bus=2)
    offsets = np.array([1.0, 2.0, 3.0, 4.0])[:, None]

    def model(inputs):
        return d.V + offsets, d.theta
    m = mae(model, d)
    assert m.mae95_v == pytest.approx(3.85)
    assert m.mae99_v == pytest.approx(3.97)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        mae(lambda x: (x, x), SnapshotSet.empty(4))


def test_model_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        mae(init_params(5, 2, 8, rng), _data())


@given(st.integers(0, 2**32 - 1))
def test_mae_permutation_invariant_and_percentiles_ordered(seed):
    r = np.random.default_rng(seed)
    d = _data(n=12, seed=seed)
    params = init_params(4, 2, 8, r)
    perm = r.permutation(12)
    a = mae(params, d)
    b = mae(params, d.subset(perm))
    assert a.mae_v == pytest.approx(b.mae_v, rel=1e-12)
    assert a.mae_theta == pytest.approx(b.mae_theta, rel=1e-12)
    assert a.mae95_v == pytest.approx(b.mae95_v, rel=1e-12)
    assert a.mae95_v <= a.mae99_v and a.mae95_theta <= a.mae99_theta
    assert min(a.mae_v, a.mae_theta, a.mae95_v) >= 0


def _metric(name, family, zone, v):
    return DatasetMetrics(name, 10, v, v, v, v, v, v, v, family, zone)


def test_family_average_equal_weighting():
    ms = [_metric("a", "simple", "z1", 1.0), _metric("b", "simple", "z2", 3.0),
          _metric("c", "line", "z1", 5.0), _metric("clean", "", "", 9.0)]
    r = build_report(ms)
    assert r.family_avg["simple"]["mae_v"] == 2.0
    assert r.zone_avg["z1"]["mae_v"] == 3.0
    assert set(r.family_avg) == {"simple", "line"}


def test_report_counts_and_round_trip(tmp_path):
    fams = ("simple", "lra", "line", "corruption")
    ms = [_metric(f"{z}_{f}", f, z, 0.1 * i + 0.01 * j)
          for i, z in enumerate(("zone1", "zone2", "zone3")) for j, f in enumerate(fams)]
    r = build_report(ms, {"regime": "dynamic"})
    text = report_csv(r).strip().splitlines()
    assert len(text) == 1 + 12 + 4 + 3
    jpath, cpath = emit_report(r, tmp_path / "rep")
    back = parse_report(jpath)
    assert back == r
    assert cpath.read_text() == report_csv(r)


def test_empty_report(tmp_path):
    jpath, cpath = emit_report(build_report([]), tmp_path / "empty.json")
    back = parse_report(jpath)
    assert back.datasets == [] and back.family_avg == {}
    assert cpath.read_text().count("\n") == 1


def test_bad_schema(tmp_path):
    (tmp_path / "x.json").write_text('{"schema": "other"}')
    with pytest.raises(ValueError, match="schema"):
        parse_report(tmp_path / "x.json")


def test_zero_level_equals_clean(rng):
    d = _data(n=8)
    params = init_params(4, 2, 8, rng)
    rows = scaled_perturbation_eval(params, d, levels=(0.0,), bus_counts=(1, 4))
    clean = mae(params, d).mae_overall
    assert rows[0]["mae_1bus"] == clean and rows[0]["mae_4bus"] == clean


def test_sweep_layout_and_determinism(rng):
    d = _data(n=8)
    params = init_params(4, 2, 8, rng)
    a = scaled_perturbation_eval(params, d, seed=3, bus_counts=(1, 4))
    b = scaled_perturbation_eval(params, d, seed=3, bus_counts=(1, 4))
    assert a == b
    assert [r["level"] for r in a] == [0.05, 0.10, 0.20, 0.30]
    assert {"mae_1bus", "mae_4bus"} <= set(a[0])


def test_perturbation_scales_selected_buses(rng):
    d = _data(n=5)
    x = perturb_inputs(d, 0.1, 2, rng)
    ratio = x / d.inputs
    changed = np.isclose(ratio, 1.1)
    assert np.all(changed.sum(1) == 4)   # 2 buses, P and Q each
    assert np.all(np.isclose(ratio, 1.0) | changed)


def test_too_many_buses_rejected(rng):
    with pytest.raises(ValueError):
        scaled_perturbation_eval(init_params(4, 2, 8, rng), _data(), bus_counts=(5,))
