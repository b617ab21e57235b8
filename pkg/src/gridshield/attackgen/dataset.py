"""Batch generation of verified attack datasets."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from ..case_model import Admittance, NetworkModel, ac_injections
from ..parallel import pmap
from ..powerflow import SnapshotSet
from .problem import AttackProblem, Baseline, FeasibleSetConfig
from .solver import STATUSES, SolverConfig, solve_attack
from .zones import AttackZone

log = logging.getLogger(__name__)

ATTACK_COLUMNS = ("family", "zone_id", "objective", "max_violation", "status", "source_index")
MIN_YIELD = 0.5


@dataclass
class AttackStats:
    zone_id: str
    family: str
    attempted: int = 0
    emitted: int = 0
    statuses: dict = field(default_factory=dict)
    violation_hist: dict = field(default_factory=dict)

    @property
    def yield_rate(self) -> float:
        return self.emitted / self.attempted if self.attempted else 0.0

    def to_dict(self) -> dict:
        return {"zone_id": self.zone_id, "family": self.family, "attempted": self.attempted,
                "emitted": self.emitted, "statuses": dict(sorted(self.statuses.items())),
                "violation_hist": dict(sorted(self.violation_hist.items()))}


def baseline_of(data: SnapshotSet, k: int, Y: Admittance) -> Baseline:
    """Clean operating point of row ``k``.

    Uses the stored pre-noise injections when present, otherwise the AC
    injections of the labelled state (consistent to solver tolerance).
    """
    V, th = data.V[k], data.theta[k]
    if data.P_clean is not None:
        return Baseline(data.P_clean[k], data.Q_clean[k], V, th)
    P, Q = ac_injections(V, th, Y)
    return Baseline(P, Q, V, th)


def _solve_one(model, Y, feasible, solver, seed, job):
    k, zk, fk, zone, family, base = job
    prob = AttackProblem(model, Y, base, zone, family, feasible, seed=(seed, k, zk, fk))
    return solve_attack(prob, solver)


def _to_snapshots(rows, data: SnapshotSet, Y: Admittance) -> SnapshotSet:
    """Emitted results as a snapshot set; the clean columns hold the baseline."""
    if not rows:
        out = SnapshotSet.empty(data.n_bus)
        out.extra = {c: [] for c in ATTACK_COLUMNS}
        return out
    k_src = [k for k, _ in rows]
    res = [r for _, r in rows]
    bases = [baseline_of(data, k, Y) for k in k_src]
    return SnapshotSet(
        P=np.array([r.P for r in res]), Q=np.array([r.Q for r in res]),
        V=np.array([r.V for r in res]), theta=np.array([r.theta for r in res]),
        kind=["attack"] * len(res), seed=data.seed[k_src],
        P_clean=np.array([b.P for b in bases]), Q_clean=np.array([b.Q for b in bases]),
        extra={"family": [r.family for r in res], "zone_id": [r.zone_id for r in res],
               "objective": [float(r.objective) for r in res],
               "max_violation": [float(r.report.max_violation) for r in res],
               "status": [r.status for r in res], "source_index": [int(k) for k in k_src]})


def generate_attack_dataset(data: SnapshotSet, model: NetworkModel, Y: Admittance,
                            zones: list[AttackZone], families: dict,
                            feasible: FeasibleSetConfig, solver: SolverConfig | None = None,
                            seed: int = 0, n_jobs: int = 1):
    """Solve every (zone, family) instance on every clean row.

    ``families`` maps family name to its config. Only results that pass the
    independent checker are emitted. Returns ``(datasets, stats)`` keyed by
    ``(zone_id, family)`` in zone-then-family order; output is the same for
    any ``n_jobs``.
    """
    solver = solver or SolverConfig()
    jobs, keys = [], []
    for zk, zone in enumerate(zones):
        for fk, (fname, fcfg) in enumerate(families.items()):
            keys.append((zone.zone_id, fname))
            for k in range(len(data)):
                jobs.append((k, zk, fk, zone, fcfg, baseline_of(data, k, Y)))
    results = pmap(partial(_solve_one, model, Y, feasible, solver, seed), jobs, n_jobs)

    datasets, stats = {}, {}
    per_key = {key: [] for key in keys}
    for job, res in zip(jobs, results):
        zone, fcfg = job[3], job[4]
        per_key[(zone.zone_id, fcfg.name)].append((job[0], res))
    for key in keys:
        st = AttackStats(*key)
        rows = []
        hist = Counter()
        for k, res in per_key[key]:
            st.attempted += 1
            st.statuses[res.status] = st.statuses.get(res.status, 0) + 1
            if res.emitted:
                rows.append((k, res))
            elif res.report is not None:
                for name, v in res.report.violations.items():
                    if v > res.report.tol:
                        hist[name] += 1
        st.emitted = len(rows)
        st.violation_hist = dict(hist)
        if st.attempted and st.yield_rate < MIN_YIELD:
            log.warning("low feasible yield %.0f%% for zone %s / %s; statuses %s; "
                        "violations %s", 100 * st.yield_rate, key[0], key[1],
                        st.statuses, dict(hist))
        datasets[key] = _to_snapshots(rows, data, Y)
        stats[key] = st
    return datasets, stats


def status_counts(stats: dict) -> dict:
    total = Counter()
    for st in stats.values():
        total.update(st.statuses)
    return {s: total.get(s, 0) for s in STATUSES}
