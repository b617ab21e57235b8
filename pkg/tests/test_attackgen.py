import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridshield.attackgen.dataset import baseline_of, generate_attack_dataset
from gridshield.attackgen.formulation import AttackNLP
from gridshield.attackgen.problem import (AttackProblem, Baseline, FeasibleSetConfig,
                                          LineConfig, LraConfig, corruption_tolerances,
                                          family_config, lra_cap, lra_costs,
                                          select_target_lines, simple_envelope)
from gridshield.attackgen.solver import SolverConfig, solve_attack
from gridshield.attackgen.verify import verify_feasibility
from gridshield.attackgen.zones import (ZoneError, default_zone_spec, enumerate_zones,
                                        load_zone_spec, make_zone)
from gridshield.case_model import GridGraph, ac_injections, build_admittance, parse_case
from gridshield.powerflow import (SnapshotSet, SnapshotSetConfig, base_case_solution,
                                  generate_snapshots, residual_scales)

from conftest import case_text

FAMILIES = ("simple", "lra", "line", "corruption")


def _net(buses, branches, gens=None):
    m = parse_case(case_text(buses, branches, gens))
    return m, build_admittance(m), GridGraph.from_model(m)


def _flat_baseline(m):
    n = m.n_bus
    return Baseline(np.zeros(n), np.zeros(n), np.ones(n), np.zeros(n))


@pytest.fixture(scope="module")
def toy4(case4, Y4):
    pf = base_case_solution(case4, Y4)
    P, Q = ac_injections(pf.V, pf.theta, Y4)
    zone = make_zone(GridGraph.from_model(case4), [1, 2, 3], zone_id="z", P0=P, Q0=Q)
    return case4, Y4, Baseline(P, Q, pf.V, pf.theta), zone


# ------------------------------------------------------------------- zones

def test_path_graph_bfs():
    m, _, g = _net([(1, 3, 0, 0)] + [(k, 1, 0, 0) for k in range(2, 6)],
                   [(k, k + 1, 0, 0.1, 0) for k in range(1, 5)])
    zones = enumerate_zones(g, 0, h_max=2)
    assert [z.buses for z in zones] == [(0, 1, 2)]
    assert zones[0].boundary == (2,) and zones[0].interior == (0, 1)


def test_triangle_zone_without_exterior():
    _, _, g = _net([(1, 3, 0, 0), (2, 1, 0, 0), (3, 1, 0, 0)],
                   [(1, 2, 0, 0.1, 0), (2, 3, 0, 0.1, 0), (1, 3, 0, 0.1, 0)])
    zones = enumerate_zones(g, 1, h_max=1, n_min=3)
    assert len(zones) == 1 and zones[0].buses == (0, 1, 2) and zones[0].boundary == ()


def test_isolated_seed_gives_no_candidates():
    _, _, g = _net([(1, 3, 0, 0), (2, 1, 0, 0)], [(1, 2, 0, 0.1, 0)])
    assert enumerate_zones(g, 0, h_max=2, n_min=3) == []


def test_ieee118_configured_zones(case118):
    zones = load_zone_spec(default_zone_spec(), case118, GridGraph.from_model(case118))
    assert [z.zone_id for z in zones] == ["zone1", "zone2", "zone3"]
    assert [z.buses for z in zones] == [(18, 19, 20, 21, 22), (69, 70, 71, 72),
                                        (22, 26, 30, 31, 112, 113, 114)]
    for z in zones:
        assert 3 <= z.size <= 10
        assert set(z.interior) | set(z.boundary) == set(z.buses)
        assert not set(z.interior) & set(z.boundary)


def test_zone_validation_errors(case118):
    g = GridGraph.from_model(case118)
    with pytest.raises(ZoneError, match="connected"):
        make_zone(g, [0, 50, 100])
    with pytest.raises(ZoneError, match="size"):
        make_zone(g, [0, 1])


@given(st.integers(0, 117), st.integers(1, 3))
def test_bfs_zone_invariants(case118, seed, h):
    g = GridGraph.from_model(case118)
    for z in enumerate_zones(g, seed, h_max=h):
        assert g.is_connected(z.buses) and 3 <= z.size <= 10
        zset = set(z.buses)
        assert set(z.boundary) == {b for b in zset if g.neighbors(b) - zset}


def test_zero_injection_detection(toy4):
    m, Y, base, zone = toy4
    P0 = base.P.copy()
    Q0 = base.Q.copy()
    P0[2], Q0[2] = 5e-7, -5e-7
    z = make_zone(GridGraph.from_model(m), zone.buses, P0=P0, Q0=Q0)
    assert z.zero_injection == (2,)


# ---------------------------------------------------------- tolerance rules

def test_feasible_set_rules():
    fs = FeasibleSetConfig(tau_p=0.1, tau_q=0.1)
    band = fs.boundary_tol(1.0)
    assert (1.0 - band, 1.0 + band) == pytest.approx((0.97, 1.03))
    assert fs.boundary_tol(0.1) == 0.01
    assert fs.conservation_tol(5.0) == pytest.approx(5e-3)
    assert fs.conservation_tol(0.2) == 1e-3
    with pytest.raises(ValueError):
        FeasibleSetConfig(tau_p=0.1, tau_q=0.1, v_min=1.1, v_max=1.0)


def test_simple_envelope_floor():
    assert simple_envelope(np.array([0.0]), 0.75, 0.01)[0] == pytest.approx(0.0075)
    assert simple_envelope(np.array([-2.0]), 0.75, 0.01)[0] == pytest.approx(1.5)


def test_corruption_tolerances():
    cfg = family_config("corruption")
    tol = corruption_tolerances(np.array([0.04, 0.0, -1.0]), cfg)
    assert tol == pytest.approx([0.002, 1e-3, 0.05])


def test_lra_cap_and_costs(case118):
    lo_hi = (1.0 - lra_cap(1.0, 0.5, 0.5), 1.0 + lra_cap(1.0, 0.5, 0.5))
    assert lo_hi == pytest.approx((0.5, 1.5))
    assert lra_cap(0.0, 0.5, 0.5) == 0.5
    cp, cm = lra_costs(case118, LraConfig(), [case118.index[50]])
    assert cp[0] == pytest.approx(50 / 118) and cm[0] == pytest.approx(50 / 118)


def test_family_config_validation():
    with pytest.raises(ValueError, match="kappa"):
        family_config("simple", {"kappa_p": 1.5})
    with pytest.raises(ValueError, match="unknown"):
        family_config("nope")
    with pytest.raises(ValueError, match="max_lines"):
        family_config("line", {"max_lines": 0})
    with pytest.raises(ValueError, match="lambda"):
        family_config("lra", {"lam": -1})


# -------------------------------------------------------------- objectives

def _nlp(m, Y, base, zone, family, tau=0.1):
    fs = FeasibleSetConfig(tau_p=tau, tau_q=tau)
    return AttackNLP(AttackProblem(m, Y, base, zone, family, fs))


def test_simple_objective_hand_value(toy4):
    m, Y, base, zone = toy4
    nlp = _nlp(m, Y, base, zone, family_config("simple"))
    x = nlp.baseline_x()
    assert nlp.objective(x, smooth=False)[0] == 0.0
    x[nlp.iV[0]] += 0.02
    x[nlp.ith[0]] += 0.01
    assert nlp.objective(x, smooth=False)[0] == pytest.approx(5e-4, abs=1e-15)


def test_corruption_objective_baseline_zero(toy4):
    m, Y, base, zone = toy4
    nlp = _nlp(m, Y, base, zone, family_config("corruption"))
    assert nlp.objective(nlp.baseline_x(), smooth=False)[0] == 0.0


def test_lra_load_shift_term(toy4):
    m, Y, base, zone = toy4
    nlp = _nlp(m, Y, base, zone, family_config("lra"))
    il = nlp.lra[2]
    assert len(il) == 2
    x = nlp.baseline_x()
    x[il] = [0.1, -0.1]
    assert x[il].sum() == 0.0
    assert nlp.objective(x, smooth=False)[0] == pytest.approx(0.02, abs=1e-15)


def test_lra_inapplicable_zone():
    # zero-load buses away from the slack: nothing to redispatch
    m, Y, g = _net([(1, 3, 0, 0)] + [(k, 1, 0, 0) for k in range(2, 6)],
                   [(k, k + 1, 0, 0.1, 0) for k in range(1, 5)])
    zone = make_zone(g, [2, 3, 4], zone_id="z")
    fs = FeasibleSetConfig(tau_p=0.1, tau_q=0.1)
    res = solve_attack(AttackProblem(m, Y, _flat_baseline(m), zone, family_config("lra"), fs))
    assert res.status == "inapplicable" and not res.emitted


def test_line_objective_hand_value():
    m, Y, g = _net([(1, 3, 0, 0), (2, 1, 0, 0), (3, 1, 0, 0)],
                   [(1, 2, 0, 0.1, 0), (2, 3, 0, 1.0, 0)])
    zone = make_zone(g, [0, 1, 2], zone_id="z")
    nlp = _nlp(m, Y, _flat_baseline(m), zone, LineConfig(max_lines=1))
    x = nlp.baseline_x()
    assert nlp.objective(x, smooth=False)[0] == 0.0
    x[nlp.iV[0]] += 0.01
    x[nlp.ith[0]] += 0.1
    assert nlp.objective(x, smooth=False)[0] == pytest.approx(1.01, rel=1e-9)


def test_line_selection_top_three():
    m, Y, g = _net([(1, 3, 0, 0)] + [(k, 1, 0, 0) for k in range(2, 6)],
                   [(1, 2, 0, 1 / 12, 0), (1, 3, 0, 1 / 9, 0), (1, 4, 0, 1 / 7, 0),
                    (1, 5, 0, 1 / 3, 0)])
    zone = make_zone(g, range(5), zone_id="z")
    chosen = select_target_lines(Y, zone, 3)
    assert sorted(round(abs(b), 9) for _, _, b in chosen) == [7, 9, 12]


def test_line_selection_requires_connected_set():
    # the two strongest lines are disjoint; the third must attach to the first
    m, Y, g = _net([(1, 3, 0, 0)] + [(k, 1, 0, 0) for k in range(2, 6)],
                   [(1, 2, 0, 1 / 12, 0), (3, 4, 0, 1 / 11, 0), (2, 3, 0, 1 / 2, 0),
                    (4, 5, 0, 1 / 1, 0)])
    zone = make_zone(g, range(5), zone_id="z")
    chosen = select_target_lines(Y, zone, 2)
    assert sorted(round(abs(b), 9) for _, _, b in chosen) == [2, 12]


# ------------------------------------------------------------------ solver

PINNED = dict(tau_p=0.0, tau_q=0.0, eps_bnd_rel=0.0, eps_bnd_abs=0.0, cons_rel=0.0,
              cons_abs=0.0)


def test_fully_pinned_problem():
    # zero-injection zone: P = Q = 0 is enforced exactly and tau = 0 ties the
    # state to it, so only the baseline state is feasible
    m, Y, g = _net([(1, 3, 0, 0)] + [(k, 1, 0, 0) for k in range(2, 6)],
                   [(k, k + 1, 0.01, 0.1, 0) for k in range(1, 5)])
    zone = make_zone(g, [1, 2, 3], zone_id="z")
    res = solve_attack(AttackProblem(m, Y, _flat_baseline(m), zone,
                                     family_config("simple"), FeasibleSetConfig(**PINNED)))
    assert res.objective < 1e-10
    assert res.status == "degenerate" and not res.emitted


def test_zero_tau_results_are_exactly_stealthy(toy4):
    # with loaded buses the injections still follow the state, so attacks
    # exist, but every residual stays at the checker tolerance
    m, Y, base, zone = toy4
    res = solve_attack(AttackProblem(m, Y, base, zone, family_config("simple"),
                                     FeasibleSetConfig(**PINNED)))
    Pi, Qi = ac_injections(res.V, res.theta, Y)
    assert res.report.passed
    assert np.max(np.abs(res.P - Pi)) <= 1e-6 and np.max(np.abs(res.Q - Qi)) <= 1e-6


@pytest.mark.parametrize("family", FAMILIES)
def test_solver_history_monotone_and_verified(toy4, family):
    m, Y, base, zone = toy4
    fs = FeasibleSetConfig(tau_p=0.05, tau_q=0.05)
    res = solve_attack(AttackProblem(m, Y, base, zone, family_config(family), fs, seed=1),
                       SolverConfig(n_starts=2))
    h = np.array(res.history)
    finite = h[np.isfinite(h)]
    assert np.all(np.diff(finite) >= 0)
    if res.emitted:
        assert res.report.passed and res.objective >= 0


def test_verifier_baseline_passes(toy4):
    m, Y, base, zone = toy4
    fs = FeasibleSetConfig(tau_p=0.01, tau_q=0.01)
    for fam in FAMILIES:
        rep = verify_feasibility(base.P, base.Q, base.V, base.theta, base, zone, m, Y, fs,
                                 family_config(fam))
        assert rep.passed and rep.max_violation < 1e-9


def test_verifier_names_voltage_violation(toy4):
    m, Y, base, zone = toy4
    fs = FeasibleSetConfig(tau_p=0.01, tau_q=0.01)
    V = base.V.copy()
    V[zone.buses[0]] = 1.06
    rep = verify_feasibility(base.P, base.Q, V, base.theta, base, zone, m, Y, fs)
    assert not rep.passed
    assert rep.violations["voltage_bounds"] == pytest.approx(0.01, abs=1e-12)
    assert any(f.startswith("voltage bounds") for f in rep.failures())


def test_verifier_flags_exterior_change(toy4):
    m, Y, base, zone = toy4
    fs = FeasibleSetConfig(tau_p=0.01, tau_q=0.01)
    P = base.P.copy()
    P[0] += 1e-9
    rep = verify_feasibility(P, base.Q, base.V, base.theta, base, zone, m, Y, fs)
    assert rep.violations["exterior"] == pytest.approx(1e-9)


def test_corruption_results_lie_in_simple_set(toy4):
    # with the Simple envelope made non-binding (kappa 1, wide floor) the
    # Simple set is the shared set, which contains every Corruption point
    m, Y, base, zone = toy4
    fs = FeasibleSetConfig(tau_p=0.05, tau_q=0.05)
    wide = family_config("simple", {"kappa_p": 1.0, "kappa_q": 1.0,
                                    "delta_p": 10.0, "delta_q": 10.0})
    n_checked = 0
    for seed in range(4):
        res = solve_attack(AttackProblem(m, Y, base, zone, family_config("corruption"), fs,
                                         seed=seed), SolverConfig(n_starts=1))
        if not res.emitted:
            continue
        rep = verify_feasibility(res.P, res.Q, res.V, res.theta, base, zone, m, Y, fs, wide)
        assert rep.passed
        n_checked += 1
    assert n_checked > 0


# ----------------------------------------------------------------- dataset

@pytest.fixture(scope="module")
def attacked118(case118, Y118):
    data = generate_snapshots(case118, Y118, SnapshotSetConfig(n_samples=3, rng_seed=2))
    sc = residual_scales(data, Y118)
    zones = load_zone_spec(default_zone_spec(), case118, GridGraph.from_model(case118))
    fams = {f: family_config(f) for f in FAMILIES}
    fs = FeasibleSetConfig(sc.tau_p, sc.tau_q)
    sets, stats = generate_attack_dataset(data, case118, Y118, zones, fams, fs, seed=0)
    return data, zones, fs, sets, stats


def test_twelve_datasets(attacked118):
    _, _, _, sets, stats = attacked118
    assert len(sets) == 12 and len(stats) == 12
    assert list(sets)[:4] == [("zone1", f) for f in FAMILIES]


def test_emitted_rows_pass_independent_audit(attacked118, case118, Y118):
    data, zones, fs, sets, _ = attacked118
    zmap = {z.zone_id: z for z in zones}
    n_rows = 0
    for (zid, fam), d in sets.items():
        zone = zmap[zid]
        Z = np.array(zone.buses)
        ext = np.setdiff1d(np.arange(118), Z)
        for k in range(len(d)):
            src = d.extra["source_index"][k]
            base = baseline_of(data, src, Y118)
            z = make_zone(GridGraph.from_model(case118), zone.buses, P0=base.P, Q0=base.Q)
            rep = verify_feasibility(d.P[k], d.Q[k], d.V[k], d.theta[k], base, z, case118,
                                     Y118, fs, family_config(fam))
            assert rep.passed, rep.failures()
            # stealth, exterior bit-identity, zero-injection exactness
            Pi, Qi = ac_injections(d.V[k], d.theta[k], Y118)
            assert np.max(np.abs(d.P[k] - Pi)) <= fs.tau_p + 1e-6
            assert np.max(np.abs(d.Q[k] - Qi)) <= fs.tau_q + 1e-6
            for a, b in ((d.P[k], base.P), (d.Q[k], base.Q), (d.V[k], base.V),
                         (d.theta[k], base.theta)):
                assert np.array_equal(a[ext], b[ext])
            zi = list(z.zero_injection)
            assert np.all(d.P[k][zi] == 0.0) and np.all(d.Q[k][zi] == 0.0)
            eps = fs.conservation_tol(base.P[Z].sum())
            assert abs(d.P[k][Z].sum() - base.P[Z].sum()) <= eps + 1e-6
            n_rows += 1
    assert n_rows > 0


def test_zone2_simple_residuals_concentrated(attacked118, case118, Y118):
    # clean baselines are power-flow consistent, so residuals measure the attack;
    # exterior neighbours see it too since their measurements stay at baseline
    _, zones, fs, sets, _ = attacked118
    d = sets[("zone2", "simple")]
    assert len(d) > 0
    Z = np.array(zones[1].buses)
    Pi, _ = ac_injections(d.V, d.theta, Y118)
    dev = np.abs(d.P - Pi).mean(0)
    g = GridGraph.from_model(case118)
    near = set(Z.tolist()).union(*(g.neighbors(b) for b in Z))
    far = np.setdiff1d(np.arange(118), sorted(near))
    assert dev[Z].max() > 1e-4 and np.all(dev <= fs.tau_p + 1e-6)
    assert dev[far].max() < 1e-9
    assert dev[Z].mean() > dev[np.setdiff1d(np.arange(118), Z)].mean()


def test_empty_input_gives_empty_outputs(case118, Y118):
    zones = load_zone_spec(default_zone_spec(), case118, GridGraph.from_model(case118))
    sets, stats = generate_attack_dataset(SnapshotSet.empty(118), case118, Y118, zones,
                                          {"simple": family_config("simple")},
                                          FeasibleSetConfig(0.01, 0.01))
    assert len(sets) == 3 and all(len(d) == 0 for d in sets.values())
    assert all(s.attempted == 0 for s in stats.values())


def test_generation_parallel_invariant(toy4):
    m, Y, _, zone = toy4
    data = generate_snapshots(m, Y, SnapshotSetConfig(n_samples=3, rng_seed=4))
    fs = FeasibleSetConfig(0.05, 0.05)
    fams = {"simple": family_config("simple")}
    a, _ = generate_attack_dataset(data, m, Y, [zone], fams, fs, seed=3, n_jobs=1)
    b, _ = generate_attack_dataset(data, m, Y, [zone], fams, fs, seed=3, n_jobs=2)
    for key in a:
        assert np.array_equal(a[key].V, b[key].V) and np.array_equal(a[key].P, b[key].P)
