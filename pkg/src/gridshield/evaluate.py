"""Robustness metrics, the scaled-perturbation sweep and report files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .pinn.model import MlpParams, forward
from .powerflow import SnapshotSet

SCHEMA_VERSION = "gridshield-report/1"
PERTURBATION_SIGN = "multiplicative (1 + level), inflation"
METRIC_FIELDS = ("mae_v", "mae_theta", "mae_overall", "mae95_v", "mae99_v",
                 "mae95_theta", "mae99_theta")


@dataclass
class DatasetMetrics:
    name: str
    n: int
    mae_v: float
    mae_theta: float
    mae_overall: float
    mae95_v: float
    mae99_v: float
    mae95_theta: float
    mae99_theta: float
    family: str = ""
    zone_id: str = ""


@dataclass
class MetricReport:
    datasets: list = field(default_factory=list)
    family_avg: dict = field(default_factory=dict)
    zone_avg: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def by_name(self, name: str) -> DatasetMetrics:
        for d in self.datasets:
            if d.name == name:
                return d
        raise KeyError(name)


def predict(model, inputs) -> tuple[np.ndarray, np.ndarray]:
    """``(V_hat, theta_hat)`` for a batch of ``[P, Q]`` inputs.

    ``model`` is either network parameters or any callable returning the
    two state blocks.
    """
    if isinstance(model, MlpParams):
        _, _, V, th = forward(model, inputs)
        return V, th
    return model(inputs)


def per_sample_errors(model, data: SnapshotSet, inputs=None):
    inputs = data.inputs if inputs is None else inputs
    V_hat, th_hat = predict(model, inputs)
    return (np.mean(np.abs(V_hat - data.V), axis=1),
            np.mean(np.abs(th_hat - data.theta), axis=1))


def mae(model, data: SnapshotSet, name: str = "", family: str = "", zone_id: str = "",
        inputs=None) -> DatasetMetrics:
    """Dataset MAE on V and theta with 95th/99th percentiles of per-sample MAE.

    Percentiles use linear interpolation between order statistics; the
    overall figure is the unweighted mean of the two channels.
    """
    if len(data) == 0:
        raise ValueError(f"empty dataset {name!r}")
    if isinstance(model, MlpParams) and data.n_bus != model.n_bus:
        raise ValueError(f"model expects {model.n_bus} buses, dataset has {data.n_bus}")
    ev, et = per_sample_errors(model, data, inputs)
    mv, mt = float(ev.mean()), float(et.mean())
    p = lambda e, q: float(np.percentile(e, q, method="linear"))
    return DatasetMetrics(name, len(data), mv, mt, 0.5 * (mv + mt),
                          p(ev, 95), p(ev, 99), p(et, 95), p(et, 99), family, zone_id)


def aggregate(metrics: list[DatasetMetrics], key: str) -> dict:
    """Equal-weight mean of each metric over datasets sharing ``key``."""
    groups = {}
    for m in metrics:
        groups.setdefault(getattr(m, key), []).append(m)
    return {g: {f: float(np.mean([getattr(m, f) for m in ms])) for f in METRIC_FIELDS}
            for g, ms in groups.items() if g}


def build_report(metrics: list[DatasetMetrics], meta: dict | None = None) -> MetricReport:
    return MetricReport(list(metrics), aggregate(metrics, "family"),
                        aggregate(metrics, "zone_id"), dict(meta or {}))


# ------------------------------------------------------ perturbation sweep

def perturb_inputs(data: SnapshotSet, level: float, n_buses: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Inputs with ``n_buses`` random buses per row scaled by ``1 + level``."""
    n = data.n_bus
    if n_buses > n:
        raise ValueError(f"cannot perturb {n_buses} buses of a {n}-bus system")
    P, Q = data.P.copy(), data.Q.copy()
    for k in range(len(data)):
        idx = rng.choice(n, size=n_buses, replace=False)
        P[k, idx] *= 1.0 + level
        Q[k, idx] *= 1.0 + level
    return np.hstack([P, Q])


def scaled_perturbation_eval(model, data: SnapshotSet, levels=(0.05, 0.10, 0.20, 0.30),
                             bus_counts=(1, 10), seed: int = 0) -> list[dict]:
    """Overall MAE per (level, bus count) against the clean labels.

    Every cell uses its own RNG stream seeded by ``(seed, cell index)``.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    for k in bus_counts:
        if k > data.n_bus:
            raise ValueError(f"bus count {k} exceeds n_bus {data.n_bus}")
    rows = []
    for i, level in enumerate(levels):
        row = {"level": float(level)}
        for j, k in enumerate(bus_counts):
            rng = np.random.default_rng([seed, i, j])
            m = mae(model, data, inputs=perturb_inputs(data, level, k, rng))
            row[f"mae_{k}bus"] = m.mae_overall
            row[f"mae_v_{k}bus"] = m.mae_v
            row[f"mae_theta_{k}bus"] = m.mae_theta
        rows.append(row)
    return rows


# ----------------------------------------------------------------- reports

def config_hash(cfg) -> str:
    """SHA-256 of the canonical JSON of ``cfg``."""
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def report_to_dict(report: MetricReport) -> dict:
    return {"schema": SCHEMA_VERSION,
            "datasets": [asdict(d) for d in report.datasets],
            "family_avg": {k: report.family_avg[k] for k in sorted(report.family_avg)},
            "zone_avg": {k: report.zone_avg[k] for k in sorted(report.zone_avg)},
            "meta": report.meta}


def report_from_dict(d: dict) -> MetricReport:
    if d.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {d.get('schema')!r}")
    return MetricReport([DatasetMetrics(**x) for x in d["datasets"]],
                        d["family_avg"], d["zone_avg"], d.get("meta", {}))


def report_csv(report: MetricReport) -> str:
    """Flat table: one row per dataset, then family and zone aggregates."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scope", "name", "family", "zone_id", "n", *METRIC_FIELDS])
    for d in report.datasets:
        w.writerow(["dataset", d.name, d.family, d.zone_id, d.n,
                    *[repr(getattr(d, f)) for f in METRIC_FIELDS]])
    for scope, table in (("family", report.family_avg), ("zone", report.zone_avg)):
        for k in sorted(table):
            w.writerow([scope, k, k if scope == "family" else "",
                        k if scope == "zone" else "", "",
                        *[repr(table[k][f]) for f in METRIC_FIELDS]])
    return buf.getvalue()


def emit_report(report: MetricReport, out: Path) -> tuple[Path, Path]:
    """Write ``<out>.json`` (full) and ``<out>.csv`` (flat); returns both paths."""
    out = Path(out)
    base = out.with_suffix("") if out.suffix in (".json", ".csv") else out
    jpath, cpath = base.with_suffix(".json"), base.with_suffix(".csv")
    jpath.parent.mkdir(parents=True, exist_ok=True)
    jpath.write_text(json.dumps(report_to_dict(report), indent=1, sort_keys=True) + "\n")
    cpath.write_text(report_csv(report))
    return jpath, cpath


def parse_report(path: Path) -> MetricReport:
    return report_from_dict(json.loads(Path(path).read_text()))
