"""Newton-Raphson AC power flow and clean snapshot dataset generation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .case_model import PQ, PV, Admittance, NetworkModel, ac_injections
from .parallel import pmap

log = logging.getLogger(__name__)


class PowerFlowError(RuntimeError):
    def __init__(self, message, mismatch=float("nan"), iterations=0):
        super().__init__(message)
        self.mismatch = mismatch
        self.iterations = iterations


@dataclass
class PowerFlowResult:
    V: np.ndarray
    theta: np.ndarray
    iterations: int
    mismatch: float


def scheduled_injections(model: NetworkModel, pd=None, qd=None, pg=None):
    """Net scheduled injections ``(P, Q)`` = generation minus load, per bus.

    ``pd``/``qd`` override the bus loads and ``pg`` the generator outputs
    (one entry per generator record).
    """
    n = model.n_bus
    pd = np.array([b.pd for b in model.buses]) if pd is None else np.asarray(pd)
    qd = np.array([b.qd for b in model.buses]) if qd is None else np.asarray(qd)
    pg = np.array([g.pg for g in model.gens]) if pg is None else np.asarray(pg)
    P = -pd.astype(float)
    Q = -qd.astype(float)
    for k, g in enumerate(model.gens):
        if g.in_service:
            i = model.index[g.bus]
            P[i] += pg[k]
            Q[i] += g.qg
    assert P.shape == (n,)
    return P, Q


def voltage_setpoints(model: NetworkModel) -> np.ndarray:
    """Initial magnitudes with generator setpoints applied at PV/slack buses."""
    V = np.ones(model.n_bus)
    for g in model.gens:
        if g.in_service:
            i = model.index[g.bus]
            if model.buses[i].type != PQ:
                V[i] = g.vg
    return V


def _jacobian(Y: sp.csr_matrix, U: np.ndarray):
    # MATPOWER dSbus_dV in polar form
    I = Y @ U
    diagU = sp.diags(U)
    diagI = sp.diags(I)
    diagUn = sp.diags(U / np.abs(U))
    dS_dVm = diagU @ np.conj(Y @ diagUn) + np.conj(diagI) @ diagUn
    dS_dVa = 1j * diagU @ np.conj(diagI - Y @ diagU)
    return dS_dVm.tocsr(), dS_dVa.tocsr()


def solve_nr(model: NetworkModel, Y: Admittance, p_spec, q_spec,
             V0=None, theta0=None, tol: float = 1e-8,
             max_iter: int = 20) -> PowerFlowResult:
    """Solve the polar AC power-flow equations by Newton-Raphson.

    PV-bus magnitudes and the slack angle are held at their start values
    (``V0`` defaults to generator setpoints, ``theta0`` to zero). The
    returned ``iterations`` counts Newton updates.

    Raises
    ------
    PowerFlowError
        If the max mismatch is still above ``tol`` after ``max_iter``
        updates, or the Jacobian is singular.
    """
    p_spec = np.asarray(p_spec, dtype=float)
    q_spec = np.asarray(q_spec, dtype=float)
    V = voltage_setpoints(model) if V0 is None else np.array(V0, dtype=float)
    theta = np.zeros(model.n_bus) if theta0 is None else np.array(theta0, dtype=float)
    pv, pq = model.indices_of(PV), model.indices_of(PQ)
    pvpq = np.r_[pv, pq]
    Ybus = Y.Y

    def mismatch():
        P, Q = ac_injections(V, theta, Y)
        return np.r_[P[pvpq] - p_spec[pvpq], Q[pq] - q_spec[pq]]

    F = mismatch()
    norm = np.max(np.abs(F)) if F.size else 0.0
    it = 0
    while norm >= tol:
        if it >= max_iter:
            raise PowerFlowError(f"Newton-Raphson did not converge in {max_iter} "
                                 f"iterations (max mismatch {norm:.3e})", norm, it)
        U = V * np.exp(1j * theta)
        dVm, dVa = _jacobian(Ybus, U)
        J = sp.bmat([
            [dVa[pvpq][:, pvpq].real, dVm[pvpq][:, pq].real],
            [dVa[pq][:, pvpq].imag, dVm[pq][:, pq].imag],
        ], format="csc")
        with np.errstate(all="ignore"):
            dx = spsolve(J, -F)
        if not np.all(np.isfinite(dx)):
            raise PowerFlowError("singular power-flow Jacobian", norm, it)
        theta[pvpq] += dx[:len(pvpq)]
        V[pq] += dx[len(pvpq):]
        it += 1
        F = mismatch()
        norm = np.max(np.abs(F))
    return PowerFlowResult(V=V, theta=theta, iterations=it, mismatch=float(norm))


# ---------------------------------------------------------------- snapshots

@dataclass
class SnapshotSetConfig:
    n_samples: int = 14822
    load_scale_range: tuple[float, float] = (0.85, 1.15)
    per_bus_jitter_sigma: float = 0.03
    noise_sigma_pq: float = 0.01
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.load_scale_range
        self.load_scale_range = (float(lo), float(hi))
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")
        if lo > hi:
            raise ValueError(f"load_scale_range lo > hi: {self.load_scale_range}")
        if self.per_bus_jitter_sigma < 0 or self.noise_sigma_pq < 0:
            raise ValueError("sigmas must be >= 0")


@dataclass
class SnapshotSet:
    """Columnar set of snapshots.

    ``P``/``Q`` are the (possibly noisy) measured injections fed to the
    estimator; ``P_clean``/``Q_clean`` keep the pre-noise values.
    """
    P: np.ndarray
    Q: np.ndarray
    V: np.ndarray
    theta: np.ndarray
    kind: list = field(default_factory=list)
    seed: np.ndarray = None
    P_clean: np.ndarray = None
    Q_clean: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.P)
        if self.seed is None:
            self.seed = np.zeros(n, dtype=np.int64)
        if not self.kind:
            self.kind = ["clean"] * n

    def __len__(self):
        return len(self.P)

    @property
    def n_bus(self) -> int:
        return self.P.shape[1]

    @property
    def inputs(self) -> np.ndarray:
        return np.hstack([self.P, self.Q])

    def subset(self, idx) -> "SnapshotSet":
        idx = np.asarray(idx, dtype=int)
        pick = lambda a: None if a is None else a[idx]
        return SnapshotSet(
            P=self.P[idx], Q=self.Q[idx], V=self.V[idx], theta=self.theta[idx],
            kind=[self.kind[k] for k in idx], seed=self.seed[idx],
            P_clean=pick(self.P_clean), Q_clean=pick(self.Q_clean),
            extra={k: [v[i] for i in idx] for k, v in self.extra.items()})

    @classmethod
    def empty(cls, n_bus: int) -> "SnapshotSet":
        z = np.zeros((0, n_bus))
        return cls(z, z.copy(), z.copy(), z.copy(), [], np.zeros(0, dtype=np.int64),
                   z.copy(), z.copy())


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def _draw_operating_point(model: NetworkModel, cfg: SnapshotSetConfig, rng):
    pd0 = np.array([b.pd for b in model.buses])
    qd0 = np.array([b.qd for b in model.buses])
    pg0 = np.array([g.pg for g in model.gens])
    scale = rng.uniform(*cfg.load_scale_range)
    jitter = 1.0 + cfg.per_bus_jitter_sigma * rng.standard_normal(model.n_bus)
    factor = scale * jitter
    pd, qd = pd0 * factor, qd0 * factor
    total0 = pd0.sum()
    pg = pg0 * (pd.sum() / total0) if total0 != 0 else pg0.copy()
    return pd, qd, pg


def solve_snapshot(model, Y, cfg, index, base):
    """Draw, solve and noise one sample; returns a tuple or ``None`` on failure."""
    rng = _sample_rng(cfg.rng_seed, index)
    pd, qd, pg = _draw_operating_point(model, cfg, rng)
    p_spec, q_spec = scheduled_injections(model, pd, qd, pg)
    try:
        res = solve_nr(model, Y, p_spec, q_spec, V0=base.V, theta0=base.theta)
    except PowerFlowError as exc:
        log.info("sample %d skipped: %s", index, exc)
        return None
    P_calc, Q_calc = ac_injections(res.V, res.theta, Y)
    pq = model.indices_of(PQ)
    slack = model.slack
    P_clean = p_spec.copy()
    P_clean[slack] = P_calc[slack]
    Q_clean = Q_calc.copy()
    Q_clean[pq] = q_spec[pq]
    noise = cfg.noise_sigma_pq * rng.standard_normal((2, model.n_bus))
    return (P_clean + noise[0], Q_clean + noise[1], res.V, res.theta,
            P_clean, Q_clean)


def base_case_solution(model: NetworkModel, Y: Admittance) -> PowerFlowResult:
    p, q = scheduled_injections(model)
    return solve_nr(model, Y, p, q)


def _solve_index(model, Y, cfg, base, k):
    return solve_snapshot(model, Y, cfg, k, base)


def generate_snapshots(model: NetworkModel, Y: Admittance,
                       cfg: SnapshotSetConfig, kind: str = "clean",
                       n_jobs: int = 1) -> SnapshotSet:
    """Generate ``cfg.n_samples`` solved, noised snapshots.

    Sample ``k`` draws from its own RNG stream seeded by ``(rng_seed, k)``,
    so results do not depend on ``n_jobs``. Non-converged samples are
    skipped and replaced by further draws; more than 10% failures aborts.
    """
    if cfg.n_samples == 0:
        return SnapshotSet.empty(model.n_bus)
    base = base_case_solution(model, Y)
    rows, seeds = [], []
    attempted = 0
    failures = 0
    while len(rows) < cfg.n_samples:
        need = cfg.n_samples - len(rows)
        batch = range(attempted, attempted + need)
        out = pmap(partial(_solve_index, model, Y, cfg, base), batch, n_jobs)
        for k, r in zip(batch, out):
            if r is None:
                failures += 1
            else:
                rows.append(r)
                seeds.append(k)
        attempted += need
        if failures > 0.1 * attempted:
            raise PowerFlowError(
                f"non-convergence rate {failures}/{attempted} exceeds 10%; "
                f"check load_scale_range {cfg.load_scale_range}")
    if failures:
        log.warning("%d of %d samples failed to converge and were skipped",
                    failures, attempted)
    cols = list(zip(*rows))
    return SnapshotSet(
        P=np.array(cols[0]), Q=np.array(cols[1]), V=np.array(cols[2]),
        theta=np.array(cols[3]), kind=[kind] * len(rows),
        seed=np.array(seeds, dtype=np.int64),
        P_clean=np.array(cols[4]), Q_clean=np.array(cols[5]))


@dataclass(frozen=True)
class ResidualScales:
    tau_bar_p: float
    tau_bar_q: float
    tau_p: float
    tau_q: float


def residual_scales(data: SnapshotSet, Y: Admittance, floor: float = 0.01,
                    factor: float = 0.95) -> ResidualScales:
    """Max measured-vs-reconstructed residuals over a dataset.

    ``tau_bar`` is floored at ``floor`` and the stealth thresholds are
    ``factor * tau_bar``.
    """
    if len(data) == 0:
        raise ValueError("residual_scales needs a non-empty dataset")
    P_inj, Q_inj = ac_injections(data.V, data.theta, Y)
    tbp = max(float(np.max(np.abs(data.P - P_inj))), floor)
    tbq = max(float(np.max(np.abs(data.Q - Q_inj))), floor)
    return ResidualScales(tbp, tbq, factor * tbp, factor * tbq)


def train_val_split(n: int, seed: int, val_fraction: float = 0.1):
    """Seeded shuffle into (train, val) index arrays."""
    order = np.random.default_rng([int(seed), 7919]).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


# ---------------------------------------------------------------------- I/O

def _fmt(x) -> str:
    return repr(float(x))


def snapshot_header(n_bus: int, with_clean: bool) -> list[str]:
    head = [f"{p}_{i + 1}" for p in ("P", "Q", "V", "th") for i in range(n_bus)]
    head += ["kind", "seed"]
    if with_clean:
        head += [f"{p}_{i + 1}" for p in ("Pc", "Qc") for i in range(n_bus)]
    return head


def write_snapshots(data: SnapshotSet, path: Path, extra_columns=()) -> None:
    """Write the columnar CSV (bus-major blocks, round-trip float repr)."""
    path = Path(path)
    n = data.n_bus
    with_clean = data.P_clean is not None
    head = snapshot_header(n, with_clean) + list(extra_columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(head)
        for k in range(len(data)):
            row = [_fmt(v) for v in data.P[k]] + [_fmt(v) for v in data.Q[k]]
            row += [_fmt(v) for v in data.V[k]] + [_fmt(v) for v in data.theta[k]]
            row += [data.kind[k], str(int(data.seed[k]))]
            if with_clean:
                row += [_fmt(v) for v in data.P_clean[k]]
                row += [_fmt(v) for v in data.Q_clean[k]]
            for col in extra_columns:
                v = data.extra[col][k]
                row.append(_fmt(v) if isinstance(v, (float, np.floating)) else str(v))
            w.writerow(row)


def read_snapshots(path: Path) -> SnapshotSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader)
        rows = list(reader)
    n = sum(1 for h in head if h.startswith("P_"))
    pos = {h: k for k, h in enumerate(head)}
    with_clean = "Pc_1" in pos
    if not rows:
        out = SnapshotSet.empty(n)
        out.extra = {h: [] for h in head if h not in set(snapshot_header(n, True))}
        return out
    num = np.array([[float(v) for v in r[:4 * n]] for r in rows])
    kind = [r[pos["kind"]] for r in rows]
    seed = np.array([int(r[pos["seed"]]) for r in rows], dtype=np.int64)
    P_clean = Q_clean = None
    if with_clean:
        c0 = pos["Pc_1"]
        cl = np.array([[float(v) for v in r[c0:c0 + 2 * n]] for r in rows])
        P_clean, Q_clean = cl[:, :n], cl[:, n:]
    known = set(snapshot_header(n, with_clean))
    extra = {}
    for h in head:
        if h in known:
            continue
        vals = [r[pos[h]] for r in rows]
        try:
            extra[h] = [float(v) for v in vals]
        except ValueError:
            extra[h] = vals
    return SnapshotSet(P=num[:, :n], Q=num[:, n:2 * n], V=num[:, 2 * n:3 * n],
                       theta=num[:, 3 * n:], kind=kind, seed=seed,
                       P_clean=P_clean, Q_clean=Q_clean, extra=extra)


def write_dataset_dir(data: SnapshotSet, out_dir: Path, cfg: SnapshotSetConfig,
                      scales: ResidualScales | None, meta: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_snapshots(data, out_dir / "snapshots.csv")
    sidecar = {"config": asdict(cfg),
               "residual_scales": asdict(scales) if scales else None,
               "n_rows": len(data)}
    sidecar.update(meta or {})
    (out_dir / "snapshots.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def read_dataset_dir(path: Path) -> tuple[SnapshotSet, dict]:
    path = Path(path)
    if path.is_dir():
        data = read_snapshots(path / "snapshots.csv")
        side = path / "snapshots.json"
        meta = json.loads(side.read_text()) if side.exists() else {}
        return data, meta
    return read_snapshots(path), {}
