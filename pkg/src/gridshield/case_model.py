"""Network model: MATPOWER case parsing, Y-bus assembly and AC injections.

All quantities are converted to per-unit on ``base_mva`` at parse time and
angles are kept in radians internally.
"""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp

PQ, PV, SLACK = "PQ", "PV", "slack"
_BUS_TYPES = {1: PQ, 2: PV, 3: SLACK}

BUILTIN_CASES = ("case118", "case4gs")


class CaseError(ValueError):
    """Raised for malformed or physically invalid case data."""


@dataclass(frozen=True)
class BusRecord:
    id: int
    type: str
    pd: float
    qd: float
    gs: float
    bs: float
    vm: float = 1.0
    va: float = 0.0


@dataclass(frozen=True)
class BranchRecord:
    f_bus: int
    t_bus: int
    r: float
    x: float
    b: float
    tap: float = 1.0
    shift: float = 0.0
    in_service: bool = True


@dataclass(frozen=True)
class GenRecord:
    bus: int
    pg: float
    qg: float
    qmax: float
    qmin: float
    vg: float
    in_service: bool = True


@dataclass(frozen=True)
class NetworkModel:
    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    gens: tuple[GenRecord, ...]
    base_mva: float = 100.0
    name: str = ""
    index: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        # bus id -> internal 0-based position
        object.__setattr__(
            self, "index", {b.id: k for k, b in enumerate(self.buses)})

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> np.ndarray:
        return np.array([b.id for b in self.buses])

    @property
    def slack(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.type == SLACK)

    def indices_of(self, kind: str) -> np.ndarray:
        return np.array([k for k, b in enumerate(self.buses) if b.type == kind],
                        dtype=int)

    def gen_buses(self) -> np.ndarray:
        """Internal indices of buses hosting at least one in-service generator."""
        return np.array(sorted({self.index[g.bus] for g in self.gens
                                if g.in_service}), dtype=int)

    def in_service_branches(self) -> list[BranchRecord]:
        return [br for br in self.branches if br.in_service]

    def to_json(self) -> str:
        return json.dumps({
            "name": self.name,
            "base_mva": self.base_mva,
            "buses": [asdict(b) for b in self.buses],
            "branches": [asdict(b) for b in self.branches],
            "gens": [asdict(g) for g in self.gens],
        }, indent=1)


# ----------------------------------------------------------------- parsing

def _matrix_block(text: str, name: str) -> tuple[list[list[float]], int] | None:
    m = re.search(rf"mpc\.{name}\s*=\s*\[", text)
    if m is None:
        return None
    start_line = text.count("\n", 0, m.end()) + 1
    end = text.find("]", m.end())
    if end < 0:
        raise CaseError(f"unterminated matrix 'mpc.{name}' (line {start_line})")
    rows = []
    body = text[m.end():end]
    for offset, raw in enumerate(body.split("\n")):
        line = raw.split("%", 1)[0]
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            try:
                rows.append([float(tok) for tok in chunk.replace(",", " ").split()])
            except ValueError:
                raise CaseError(
                    f"malformed row in mpc.{name} at line {start_line + offset}: "
                    f"{chunk!r}") from None
    return rows, start_line


def parse_case(text: str, name: str = "") -> NetworkModel:
    """Parse MATPOWER case text into a per-unit :class:`NetworkModel`.

    Raises
    ------
    CaseError
        On malformed rows (message names the line), missing sections,
        missing/duplicate slack, dangling branch endpoints or buses that
        are not connected to the slack through in-service branches.
    """
    m = re.search(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)", text)
    if m is None:
        raise CaseError("missing mpc.baseMVA")
    base = float(m.group(1))
    if not base > 0:
        raise CaseError(f"base_mva must be positive, got {base}")

    blocks = {}
    for key, min_cols in (("bus", 13), ("gen", 10), ("branch", 11)):
        parsed = _matrix_block(text, key)
        if parsed is None:
            raise CaseError(f"missing matrix mpc.{key}")
        rows, line0 = parsed
        for k, row in enumerate(rows):
            if len(row) < min_cols:
                raise CaseError(f"malformed row in mpc.{key} near line {line0 + k}: "
                                f"expected >= {min_cols} columns, got {len(row)}")
        blocks[key] = rows

    buses = []
    for row in blocks["bus"]:
        btype = int(row[1])
        if btype == 4:
            raise CaseError(f"isolated bus type 4 not supported (bus {int(row[0])})")
        if btype not in _BUS_TYPES:
            raise CaseError(f"unknown bus type {btype} at bus {int(row[0])}")
        buses.append(BusRecord(
            id=int(row[0]), type=_BUS_TYPES[btype],
            pd=row[2] / base, qd=row[3] / base,
            gs=row[4] / base, bs=row[5] / base,
            vm=row[7], va=np.deg2rad(row[8])))
    gens = [GenRecord(bus=int(r[0]), pg=r[1] / base, qg=r[2] / base,
                      qmax=r[3] / base, qmin=r[4] / base, vg=r[5],
                      in_service=r[7] > 0) for r in blocks["gen"]]
    branches = [BranchRecord(f_bus=int(r[0]), t_bus=int(r[1]), r=r[2], x=r[3],
                             b=r[4], tap=r[8] if r[8] != 0 else 1.0,
                             shift=np.deg2rad(r[9]), in_service=r[10] > 0)
                for r in blocks["branch"]]
    model = NetworkModel(tuple(buses), tuple(branches), tuple(gens), base, name)
    validate_model(model)
    return model


def validate_model(model: NetworkModel) -> None:
    ids = [b.id for b in model.buses]
    if len(set(ids)) != len(ids):
        raise CaseError("duplicate bus ids")
    n_slack = sum(b.type == SLACK for b in model.buses)
    if n_slack != 1:
        raise CaseError(f"expected exactly one slack bus, found {n_slack}")
    for br in model.branches:
        for end in (br.f_bus, br.t_bus):
            if end not in model.index:
                raise CaseError(f"branch {br.f_bus}-{br.t_bus} references "
                                f"unknown bus {end}")
    for g in model.gens:
        if g.bus not in model.index:
            raise CaseError(f"generator references unknown bus {g.bus}")
    graph = GridGraph.from_model(model)
    seen = graph.reachable(model.slack)
    if len(seen) != model.n_bus:
        missing = sorted(ids[k] for k in set(range(model.n_bus)) - seen)
        raise CaseError(f"disconnected bus(es) {missing}")


def load_case(source: str | Path) -> NetworkModel:
    """Load a case from a file path or one of the bundled case names."""
    src = str(source)
    if src in BUILTIN_CASES:
        text = resources.files("gridshield.data").joinpath(f"{src}.m").read_text()
        return parse_case(text, name=src)
    path = Path(src)
    if not path.is_file():
        raise CaseError(f"case file not found: {src}")
    return parse_case(path.read_text(), name=path.stem)


# --------------------------------------------------------------- admittance

def branch_admittances(br: BranchRecord) -> tuple[complex, complex, complex, complex]:
    """Return the pi-model two-port entries ``(Yff, Yft, Ytf, Ytt)``."""
    z = complex(br.r, br.x)
    if z == 0:
        raise CaseError(f"zero-impedance branch {br.f_bus}-{br.t_bus}")
    ys = 1.0 / z
    tap = br.tap * np.exp(1j * br.shift)
    ytt = ys + 0.5j * br.b
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap
    return yff, yft, ytf, ytt


@dataclass(frozen=True)
class Admittance:
    """Bus admittance split into conductance ``G`` and susceptance ``B``.

    ``rows``/``cols``/``g``/``b`` hold the structural nonzeros in COO form
    (explicit zeros are kept so the pattern mirrors branch adjacency).
    """
    Y: sp.csr_matrix
    rows: np.ndarray
    cols: np.ndarray
    g: np.ndarray
    b: np.ndarray

    @property
    def n_bus(self) -> int:
        return self.Y.shape[0]

    @property
    def G(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.g, (self.rows, self.cols)), shape=self.Y.shape)

    @property
    def B(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.b, (self.rows, self.cols)), shape=self.Y.shape)

    def dense(self) -> np.ndarray:
        return self.Y.toarray()

    def entry(self, i: int, j: int) -> complex:
        return complex(self.Y[i, j])


def build_admittance(model: NetworkModel) -> Admittance:
    n = model.n_bus
    idx = model.index
    r, c, v = [], [], []
    for k, bus in enumerate(model.buses):
        r.append(k)
        c.append(k)
        v.append(complex(bus.gs, bus.bs))
    for br in model.in_service_branches():
        f, t = idx[br.f_bus], idx[br.t_bus]
        yff, yft, ytf, ytt = branch_admittances(br)
        r += [f, f, t, t]
        c += [f, t, f, t]
        v += [yff, yft, ytf, ytt]
    coo = sp.coo_matrix((np.array(v, dtype=complex), (r, c)), shape=(n, n))
    Y = coo.tocsr()
    Y.sum_duplicates()
    Y.sort_indices()
    cy = Y.tocoo()
    return Admittance(Y=Y, rows=cy.row.astype(int), cols=cy.col.astype(int),
                      g=cy.data.real.copy(), b=cy.data.imag.copy())


# --------------------------------------------------------------- injections

def ac_injections(V, theta, Y: Admittance) -> tuple[np.ndarray, np.ndarray]:
    """Net AC injections ``(P, Q)`` reconstructed from a polar state.

    ``V`` and ``theta`` may be single states of length ``n_bus`` or batches
    with shape ``(k, n_bus)``.
    """
    V = np.asarray(V, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if V.shape != theta.shape or V.shape[-1] != Y.n_bus:
        raise ValueError(f"state shape mismatch: V{V.shape}, theta{theta.shape}, "
                         f"n_bus={Y.n_bus}")
    U = V * np.exp(1j * theta)
    # S_i = U_i * conj(sum_j Y_ij U_j)
    I = (Y.Y @ U.T).T if U.ndim == 2 else Y.Y @ U
    S = U * np.conj(I)
    return S.real, S.imag


def ac_injections_dense(V, theta, G: np.ndarray, B: np.ndarray):
    """Direct double-sum evaluation; an independent cross-check for the sparse path."""
    V = np.asarray(V, dtype=float)
    theta = np.asarray(theta, dtype=float)
    dth = theta[:, None] - theta[None, :]
    vv = V[:, None] * V[None, :]
    P = np.sum(vv * (G * np.cos(dth) + B * np.sin(dth)), axis=1)
    Q = np.sum(vv * (G * np.sin(dth) - B * np.cos(dth)), axis=1)
    return P, Q


def branch_active_flow(V, theta, branch: BranchRecord, model: NetworkModel,
                       from_end: bool = True) -> float:
    """Active power leaving the chosen end of ``branch`` (pi-model)."""
    if not branch.in_service:
        raise ValueError(f"branch {branch.f_bus}-{branch.t_bus} is out of service")
    f, t = model.index[branch.f_bus], model.index[branch.t_bus]
    uf = V[f] * np.exp(1j * theta[f])
    ut = V[t] * np.exp(1j * theta[t])
    yff, yft, ytf, ytt = branch_admittances(branch)
    if from_end:
        return float((uf * np.conj(yff * uf + yft * ut)).real)
    return float((ut * np.conj(ytf * uf + ytt * ut)).real)


# -------------------------------------------------------------------- graph

@dataclass(frozen=True)
class GridGraph:
    """Undirected bus adjacency over in-service branches (internal indices)."""
    adjacency: tuple[frozenset, ...]

    @classmethod
    def from_model(cls, model: NetworkModel) -> "GridGraph":
        adj = [set() for _ in range(model.n_bus)]
        for br in model.in_service_branches():
            f, t = model.index[br.f_bus], model.index[br.t_bus]
            if f != t:
                adj[f].add(t)
                adj[t].add(f)
        return cls(tuple(frozenset(a) for a in adj))

    @classmethod
    def from_edges(cls, n: int, edges) -> "GridGraph":
        adj = [set() for _ in range(n)]
        for a, b in edges:
            if a != b:
                adj[a].add(b)
                adj[b].add(a)
        return cls(tuple(frozenset(a) for a in adj))

    @property
    def n(self) -> int:
        return len(self.adjacency)

    def neighbors(self, k: int) -> frozenset:
        return self.adjacency[k]

    def reachable(self, start: int, within=None) -> set:
        seen = {start}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in self.adjacency[u]:
                if v not in seen and (within is None or v in within):
                    seen.add(v)
                    queue.append(v)
        return seen

    def is_connected(self, nodes) -> bool:
        nodes = set(nodes)
        if not nodes:
            return False
        return self.reachable(min(nodes), within=nodes) == nodes
