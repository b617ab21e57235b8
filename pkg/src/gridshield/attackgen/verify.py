"""Independent feasibility checker for attacked snapshots.

Everything here is recomputed from the network model and the two
snapshots; nothing is taken from the solver's formulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..case_model import Admittance, NetworkModel, ac_injections, branch_active_flow
from .problem import (Baseline, FeasibleSetConfig, corruption_tolerances, lra_cap,
                      simple_envelope, zone_gen_load_buses)
from .zones import AttackZone

CHECK_TOL = 1e-6
SHARED_GROUPS = ("residual_p", "residual_q", "boundary_transfer", "conservation_p",
                 "conservation_q", "voltage_bounds", "angle_bounds", "zero_injection",
                 "exterior")


@dataclass
class FeasibilityReport:
    violations: dict = field(default_factory=dict)
    tol: float = CHECK_TOL

    @property
    def max_violation(self) -> float:
        return max(self.violations.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.violations.values())

    def failures(self) -> list[str]:
        return [f"{k.replace('_', ' ')} violated by {v:.3g}"
                for k, v in self.violations.items() if v > self.tol]


def _excess(x, lo, hi) -> float:
    x = np.asarray(x, float)
    return float(np.max(np.maximum(np.asarray(lo) - x, x - np.asarray(hi)), initial=0.0))


def boundary_flows(V, theta, model: NetworkModel, zone: AttackZone) -> np.ndarray:
    """Per boundary bus, total AC active flow sent to adjacent exterior buses."""
    zset = set(zone.buses)
    out = np.zeros(len(zone.boundary))
    pos = {b: k for k, b in enumerate(zone.boundary)}
    for br in model.in_service_branches():
        f, t = model.index[br.f_bus], model.index[br.t_bus]
        if f in zset and t not in zset:
            out[pos[f]] += branch_active_flow(V, theta, br, model, from_end=True)
        elif t in zset and f not in zset:
            out[pos[t]] += branch_active_flow(V, theta, br, model, from_end=False)
    return out


def verify_feasibility(P, Q, V, theta, baseline: Baseline, zone: AttackZone,
                       model: NetworkModel, Y: Admittance, feasible: FeasibleSetConfig,
                       family=None, tol: float = CHECK_TOL) -> FeasibilityReport:
    """Max violation per constraint group; passes iff every group is within ``tol``."""
    P, Q, V, theta = (np.asarray(a, float) for a in (P, Q, V, theta))
    P0, Q0 = np.asarray(baseline.P, float), np.asarray(baseline.Q, float)
    Z = np.array(zone.buses, dtype=int)
    ext = np.setdiff1d(np.arange(model.n_bus), Z)
    viol = {}

    P_inj, Q_inj = ac_injections(V, theta, Y)
    rp, rq = P - P_inj, Q - Q_inj
    viol["residual_p"] = _excess(rp, -feasible.tau_p, feasible.tau_p)
    viol["residual_q"] = _excess(rq, -feasible.tau_q, feasible.tau_q)

    F0 = boundary_flows(baseline.V, baseline.theta, model, zone)
    Fa = boundary_flows(V, theta, model, zone)
    band = np.array([feasible.boundary_tol(f) for f in F0])
    viol["boundary_transfer"] = _excess(Fa - F0, -band, band)

    eps = feasible.conservation_tol(float(P0[Z].sum()))
    viol["conservation_p"] = max(abs(float(P[Z].sum() - P0[Z].sum())) - eps, 0.0)
    viol["conservation_q"] = max(abs(float(Q[Z].sum() - Q0[Z].sum())) - eps, 0.0)
    viol["voltage_bounds"] = _excess(V[Z], feasible.v_min, feasible.v_max)
    viol["angle_bounds"] = _excess(theta[Z], feasible.theta_min, feasible.theta_max)
    zi = np.array(zone.zero_injection, dtype=int)
    viol["zero_injection"] = float(np.max(np.abs(np.r_[P[zi], Q[zi]]), initial=0.0))
    pairs = ((P, P0), (Q, Q0), (V, baseline.V), (theta, baseline.theta))
    if all(np.array_equal(a[ext], np.asarray(b)[ext]) for a, b in pairs):
        viol["exterior"] = 0.0
    else:
        d = np.concatenate([np.abs(a[ext] - np.asarray(b)[ext]) for a, b in pairs])
        viol["exterior"] = np.inf if np.isnan(d).any() else float(d.max())

    name = getattr(family, "name", None)
    if name == "simple":
        nz = np.setdiff1d(Z, zi)
        ep = simple_envelope(P0[nz], family.kappa_p, family.delta_p)
        eq = simple_envelope(Q0[nz], family.kappa_q, family.delta_q)
        viol["simple_envelope"] = max(_excess(P[nz] - P0[nz], -ep, ep),
                                      _excess(Q[nz] - Q0[nz], -eq, eq))
    elif name == "lra":
        gens, loads = zone_gen_load_buses(model, zone, P0)
        caps = [(b, lra_cap(P0[b], family.gen_cap, family.gen_fallback)) for b in gens]
        caps += [(b, lra_cap(P0[b], family.load_cap, family.load_fallback)) for b in loads]
        viol["lra_caps"] = max((max(abs(P[b] - P0[b]) - c, 0.0) for b, c in caps), default=0.0)
        viol["load_balance"] = abs(float(sum(P[b] - P0[b] for b in loads)))
        others = [b for b in Z if b not in gens and b not in loads and b not in set(zi)]
        viol["lra_fixed_p"] = float(max((abs(P[b] - P0[b]) for b in others), default=0.0))
    elif name == "corruption":
        Pi0, Qi0 = ac_injections(baseline.V, baseline.theta, Y)
        r0p, r0q = (P0 - Pi0)[Z], (Q0 - Qi0)[Z]
        tp, tq = corruption_tolerances(r0p, family), corruption_tolerances(r0q, family)
        viol["residual_match"] = max(_excess(rp[Z] - r0p, -tp, tp),
                                     _excess(rq[Z] - r0q, -tq, tq))
    return FeasibilityReport({k: float(v) for k, v in viol.items()}, tol)
