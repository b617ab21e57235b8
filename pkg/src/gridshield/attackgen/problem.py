"""Attack problem definitions: shared feasible set and the four families."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..case_model import Admittance, NetworkModel, branch_admittances
from .zones import AttackZone, with_zero_injection


@dataclass(frozen=True)
class FeasibleSetConfig:
    tau_p: float
    tau_q: float
    eps_bnd_rel: float = 0.03
    eps_bnd_abs: float = 0.01
    v_min: float = 0.95
    v_max: float = 1.05
    theta_min: float = -math.pi
    theta_max: float = math.pi
    cons_rel: float = 1e-3
    cons_abs: float = 1e-3

    def __post_init__(self):
        if min(self.tau_p, self.tau_q) < 0:
            raise ValueError("residual thresholds must be >= 0")
        if not self.v_min < self.v_max or not self.theta_min < self.theta_max:
            raise ValueError("state bounds must satisfy min < max")

    def conservation_tol(self, zone_p_sum: float) -> float:
        return max(self.cons_rel * abs(zone_p_sum), self.cons_abs)

    def boundary_tol(self, f0: float) -> float:
        return max(self.eps_bnd_rel * abs(f0), self.eps_bnd_abs)


@dataclass(frozen=True)
class SimpleConfig:
    kappa_p: float = 0.75
    kappa_q: float = 0.75
    delta_p: float = 0.01
    delta_q: float = 0.01
    name: str = field(default="simple", init=False)

    def validate(self) -> list[str]:
        errs = [f"kappa out of (0,1]: {k}" for k in (self.kappa_p, self.kappa_q)
                if not 0 < k <= 1]
        if self.delta_p <= 0 or self.delta_q <= 0:
            errs.append("delta must be > 0")
        return errs


@dataclass(frozen=True)
class LraConfig:
    gen_cap: float = 0.5
    gen_fallback: float = 0.5
    load_cap: float = 0.3
    load_fallback: float = 0.3
    lam: float = 0.1
    cost_plus: tuple | None = None
    cost_minus: tuple | None = None
    name: str = field(default="lra", init=False)

    def validate(self) -> list[str]:
        errs = [f"cap out of (0,1]: {c}" for c in
                (self.gen_cap, self.gen_fallback, self.load_cap, self.load_fallback)
                if not 0 < c <= 1]
        if self.lam < 0:
            errs.append("lambda must be >= 0")
        if (self.cost_plus is None) != (self.cost_minus is None):
            errs.append("cost vectors must be given together or not at all")
        return errs


@dataclass(frozen=True)
class LineConfig:
    max_lines: int = 3
    name: str = field(default="line", init=False)

    def validate(self) -> list[str]:
        return [] if self.max_lines >= 1 else ["max_lines must be >= 1"]


@dataclass(frozen=True)
class CorruptionConfig:
    beta: float = 0.05
    eps_r: float = 1e-3
    name: str = field(default="corruption", init=False)

    def validate(self) -> list[str]:
        errs = []
        if self.beta < 0:
            errs.append("beta must be >= 0")
        if self.eps_r <= 0:
            errs.append("eps_r must be > 0")
        return errs


FAMILIES = {"simple": SimpleConfig, "lra": LraConfig, "line": LineConfig,
            "corruption": CorruptionConfig}
FAMILY_LABELS = {"simple": "Simple FDIA", "lra": "Load Redistribution",
                 "line": "Line Overload", "corruption": "State Estimation Corruption"}


def family_config(name: str, overrides: dict | None = None):
    if name not in FAMILIES:
        raise ValueError(f"unknown attack family {name!r}; expected one of {sorted(FAMILIES)}")
    cls = FAMILIES[name]
    allowed = {f.name for f in fields(cls) if f.init}
    overrides = dict(overrides or {})
    unknown = set(overrides) - allowed
    if unknown:
        raise ValueError(f"unknown keys for family {name}: {sorted(unknown)}")
    for key in ("cost_plus", "cost_minus"):
        if overrides.get(key) is not None:
            overrides[key] = tuple(overrides[key])
    cfg = cls(**overrides)
    errs = cfg.validate()
    if errs:
        raise ValueError(f"{name}: " + "; ".join(errs))
    return cfg


def family_dict(cfg) -> dict:
    return {k: v for k, v in asdict(cfg).items() if k != "name"}


@dataclass
class Baseline:
    """Power-flow-consistent operating point the attack starts from."""
    P: np.ndarray
    Q: np.ndarray
    V: np.ndarray
    theta: np.ndarray


@dataclass
class AttackProblem:
    model: NetworkModel
    Y: Admittance
    baseline: Baseline
    zone: AttackZone
    family: object
    feasible: FeasibleSetConfig
    seed: int | tuple = 0   # per-instance RNG stream (inner-solver restarts only)

    def __post_init__(self):
        self.zone = with_zero_injection(self.zone, self.baseline.P, self.baseline.Q)


# ---------------------------------------------------------------- helpers

def boundary_branches(model: NetworkModel, zone: AttackZone) -> list[tuple]:
    """``(boundary bus, exterior bus, branch, from_end)`` for zone-exterior ties."""
    zset = set(zone.buses)
    out = []
    for br in model.in_service_branches():
        f, t = model.index[br.f_bus], model.index[br.t_bus]
        if f in zset and t not in zset:
            out.append((f, t, br, True))
        elif t in zset and f not in zset:
            out.append((t, f, br, False))
    return out


def zone_gen_load_buses(model: NetworkModel, zone: AttackZone, P0):
    """Generator and load buses of the zone (zero-injection buses excluded).

    A bus with an in-service generator counts as a generator bus; any other
    bus with nonzero baseline active injection is a load bus.
    """
    gen_set = set(model.gen_buses().tolist())
    zi = set(zone.zero_injection)
    gens = [b for b in zone.buses if b in gen_set and b not in zi]
    loads = [b for b in zone.buses if b not in gen_set and b not in zi and P0[b] != 0]
    return gens, loads


def lra_costs(model: NetworkModel, cfg: LraConfig, gens) -> tuple[np.ndarray, np.ndarray]:
    """Per-generator-bus (c+, c-); bus-index heuristic ``id / N_bus`` by default."""
    if cfg.cost_plus is None:
        ids = np.array([model.buses[b].id for b in gens], dtype=float)
        c = ids / model.n_bus
        return c, c.copy()
    cp, cm = np.asarray(cfg.cost_plus, float), np.asarray(cfg.cost_minus, float)
    if len(cp) != model.n_bus or len(cm) != model.n_bus:
        raise ValueError("cost vectors must have one entry per bus")
    return cp[gens], cm[gens]


def lra_cap(value: float, cap: float, fallback: float) -> float:
    return cap * abs(value) if value != 0 else fallback


def select_target_lines(Y: Admittance, zone: AttackZone, max_lines: int = 3) -> list[tuple]:
    """Connected set of up to ``max_lines`` zone/boundary-interface lines by |B_ij|.

    Returns ``(i, j, B_ij)`` with ``i < j``.
    """
    zset = set(zone.buses)
    cands = {}
    for i, j, b in zip(Y.rows, Y.cols, Y.b):
        if i < j and (i in zset or j in zset):
            cands[(int(i), int(j))] = float(b)
    ranked = sorted(cands.items(), key=lambda kv: (-abs(kv[1]), kv[0]))
    chosen = []
    nodes = set()
    while len(chosen) < max_lines:
        for (i, j), b in ranked:
            if (i, j, b) in chosen:
                continue
            if not chosen or i in nodes or j in nodes:
                chosen.append((i, j, b))
                nodes |= {i, j}
                break
        else:
            break
    return chosen


def clean_residuals(baseline: Baseline, Y: Admittance):
    from ..case_model import ac_injections
    P_inj, Q_inj = ac_injections(baseline.V, baseline.theta, Y)
    return baseline.P - P_inj, baseline.Q - Q_inj


def corruption_tolerances(r0: np.ndarray, cfg: CorruptionConfig) -> np.ndarray:
    return np.maximum(cfg.beta * np.abs(r0), cfg.eps_r)


def simple_envelope(x0: np.ndarray, kappa: float, delta: float) -> np.ndarray:
    return kappa * np.maximum(np.abs(x0), delta)


def flow_terms(model: NetworkModel, zone: AttackZone):
    """Boundary flow terms as arrays (owner row, bus i, bus j, g_ii, g_ij, b_ij)."""
    bnd_rows = {b: k for k, b in enumerate(zone.boundary)}
    owner, bi, bj, ga, gc, bc = [], [], [], [], [], []
    for i, j, br, from_end in boundary_branches(model, zone):
        yff, yft, ytf, ytt = branch_admittances(br)
        a, c = (yff, yft) if from_end else (ytt, ytf)
        owner.append(bnd_rows[i])
        bi.append(i)
        bj.append(j)
        ga.append(a.real)
        gc.append(c.real)
        bc.append(c.imag)
    return (np.array(owner, int), np.array(bi, int), np.array(bj, int),
            np.array(ga), np.array(gc), np.array(bc))


def boundary_transfer(V, theta, terms, n_rows: int) -> np.ndarray:
    owner, bi, bj, ga, gc, bc = terms
    dth = theta[bi] - theta[bj]
    vals = V[bi] ** 2 * ga + V[bi] * V[bj] * (gc * np.cos(dth) + bc * np.sin(dth))
    return np.bincount(owner, vals, minlength=n_rows)
