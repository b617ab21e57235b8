"""Attack-zone construction by hop-limited breadth-first search."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from ..case_model import GridGraph, NetworkModel

ZI_TOL = 1e-6


class ZoneError(ValueError):
    pass


@dataclass(frozen=True)
class AttackZone:
    """A connected bus set (internal indices) split into interior/boundary."""
    buses: tuple
    interior: tuple
    boundary: tuple
    zero_injection: tuple = ()
    seed_bus: int | None = None
    hop_limit: int | None = None
    zone_id: str = ""

    @property
    def size(self) -> int:
        return len(self.buses)


def partition(graph: GridGraph, buses) -> tuple[tuple, tuple]:
    """Split ``buses`` into (interior, boundary); boundary buses touch the exterior."""
    zone = set(buses)
    boundary = tuple(sorted(b for b in zone if graph.neighbors(b) - zone))
    interior = tuple(sorted(zone - set(boundary)))
    return interior, boundary


def zero_injection_buses(buses, P0, Q0, tol: float = ZI_TOL) -> tuple:
    return tuple(int(b) for b in sorted(buses)
                 if abs(P0[b]) < tol and abs(Q0[b]) < tol)


def with_zero_injection(zone: AttackZone, P0, Q0) -> AttackZone:
    """Bind the zone to a clean snapshot by detecting its zero-injection buses."""
    return replace(zone, zero_injection=zero_injection_buses(zone.buses, P0, Q0))


def make_zone(graph: GridGraph, buses, n_min: int = 3, n_max: int = 10,
              zone_id: str = "", P0=None, Q0=None, seed_bus=None,
              hop_limit=None) -> AttackZone:
    """Validate an explicit bus set and build the zone.

    Raises
    ------
    ZoneError
        If the set is not connected or its size is outside ``[n_min, n_max]``.
    """
    buses = tuple(sorted({int(b) for b in buses}))
    if any(b < 0 or b >= graph.n for b in buses):
        raise ZoneError(f"zone {zone_id!r}: bus index out of range")
    if not n_min <= len(buses) <= n_max:
        raise ZoneError(f"zone {zone_id!r}: size {len(buses)} outside [{n_min}, {n_max}]")
    if not graph.is_connected(buses):
        raise ZoneError(f"zone {zone_id!r}: buses do not induce a connected subgraph")
    interior, boundary = partition(graph, buses)
    zone = AttackZone(buses, interior, boundary, (), seed_bus, hop_limit, zone_id)
    if P0 is not None:
        zone = with_zero_injection(zone, P0, Q0)
    return zone


def bfs_order(graph: GridGraph, seed_bus: int, h_max: int) -> list[tuple[int, int]]:
    """``(hop, bus)`` pairs reachable within ``h_max`` hops, sorted by hop then bus."""
    hops = {seed_bus: 0}
    queue = deque([seed_bus])
    while queue:
        u = queue.popleft()
        if hops[u] == h_max:
            continue
        for v in graph.neighbors(u):
            if v not in hops:
                hops[v] = hops[u] + 1
                queue.append(v)
    return sorted((h, b) for b, h in hops.items())


def enumerate_zones(graph: GridGraph, seed_bus: int, h_max: int = 2, n_min: int = 3,
                    n_max: int = 10, P0=None, Q0=None) -> list[AttackZone]:
    """Candidate zones grown from ``seed_bus`` for hop limits ``1..h_max``.

    Each candidate is truncated to ``n_max`` buses in (hop, bus index)
    order; candidates smaller than ``n_min`` and duplicates are dropped.
    An isolated seed yields no candidates.
    """
    if not 0 <= seed_bus < graph.n:
        raise ZoneError(f"seed bus {seed_bus} out of range")
    out, seen = [], set()
    for h in range(1, h_max + 1):
        order = bfs_order(graph, seed_bus, h)[:n_max]
        buses = tuple(sorted(b for _, b in order))
        if len(buses) < n_min or buses in seen:
            continue
        seen.add(buses)
        out.append(make_zone(graph, buses, n_min, n_max, P0=P0, Q0=Q0,
                             seed_bus=seed_bus, hop_limit=h))
    return out


def default_zone_spec() -> dict:
    text = resources.files("gridshield.data").joinpath("zones_ieee118.json").read_text()
    return json.loads(text)


def load_zone_spec(spec: dict | str | Path, model: NetworkModel, graph: GridGraph,
                   n_min: int = 3, n_max: int = 10) -> list[AttackZone]:
    """Build zones from a spec dict or JSON file.

    Each entry has an ``id`` and either ``indices`` (0-based bus positions),
    ``buses`` (case bus ids) or ``seed`` (+ optional ``h_max``) for BFS;
    BFS entries take the largest candidate.
    """
    if not isinstance(spec, dict):
        spec = json.loads(Path(spec).read_text())
    zones = []
    for k, entry in enumerate(spec.get("zones", [])):
        zid = str(entry.get("id", f"zone{k + 1}"))
        if "indices" in entry:
            buses = [int(b) for b in entry["indices"]]
        elif "buses" in entry:
            try:
                buses = [model.index[int(b)] for b in entry["buses"]]
            except KeyError as exc:
                raise ZoneError(f"zone {zid!r}: unknown bus id {exc}") from None
        elif "seed" in entry:
            seed = model.index[int(entry["seed"])] if entry.get("seed_is_bus_id") \
                else int(entry["seed"])
            cands = enumerate_zones(graph, seed, int(entry.get("h_max", 2)), n_min, n_max)
            if not cands:
                raise ZoneError(f"zone {zid!r}: no BFS candidate from seed {seed}")
            zones.append(replace(cands[-1], zone_id=zid))
            continue
        else:
            raise ZoneError(f"zone {zid!r}: needs 'indices', 'buses' or 'seed'")
        zones.append(make_zone(graph, buses, n_min, n_max, zone_id=zid))
    return zones


def zone_bus_ids(zone: AttackZone, model: NetworkModel) -> list[int]:
    ids = model.bus_ids
    return [int(ids[b]) for b in zone.buses]


def zone_summary(zone: AttackZone, model: NetworkModel) -> dict:
    ids = np.asarray(model.bus_ids)
    return {"id": zone.zone_id,
            "indices": list(zone.buses),
            "bus_ids": [int(ids[b]) for b in zone.buses],
            "interior": [int(ids[b]) for b in zone.interior],
            "boundary": [int(ids[b]) for b in zone.boundary]}
