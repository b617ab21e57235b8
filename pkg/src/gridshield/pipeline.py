"""End-to-end ablation pipeline producing a deterministic report bundle.

Stages run in order: data, attacks, train (dynamic, fixed, frozen),
evaluate, sweep, report. The bundle holds no timings or absolute paths, so
two runs of the same config on the same build are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import plotting
from .attackgen.dataset import generate_attack_dataset, status_counts
from .attackgen.problem import FeasibleSetConfig, family_config
from .attackgen.solver import SolverConfig
from .attackgen.zones import default_zone_spec, load_zone_spec, zone_summary
from .case_model import GridGraph, build_admittance, load_case
from .evaluate import (PERTURBATION_SIGN, build_report, config_hash, emit_report, mae,
                       predict, scaled_perturbation_eval)
from .parallel import default_jobs
from .pinn.train import (Dataset, TrainConfig, random_search, save_checkpoint, train)
from .powerflow import (SnapshotSetConfig, generate_snapshots, residual_scales,
                        train_val_split, write_snapshots)

log = logging.getLogger(__name__)

BUNDLE_SCHEMA = "gridshield-bundle/1"


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {cause}")


def log_event(event: str, **fields) -> None:
    """One JSON object per log line."""
    log.info(json.dumps({"event": event, **fields}, sort_keys=True, default=str))


@contextmanager
def stage(name: str):
    t0 = time.perf_counter()
    log_event("stage_start", stage=name)
    try:
        yield
    except Exception as exc:
        log_event("stage_failed", stage=name, error=str(exc))
        raise StageError(name, exc) from exc
    log_event("stage_done", stage=name, seconds=round(time.perf_counter() - t0, 3))


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=list) + "\n")
    return path


def _write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    path.write_text(buf.getvalue())
    return path


def _zones(cfg, model, graph):
    spec = default_zone_spec() if cfg["zones"] == "default" else cfg["zones"]
    return load_zone_spec(spec, model, graph)


def _subset(idx: np.ndarray, n) -> np.ndarray:
    return idx if n is None else idx[:n]


def comparison_table(reports: dict, base: str = "fixed", target: str = "dynamic") -> list:
    """Per family: zone-averaged overall MAE of both regimes and the reduction."""
    rows = []
    if base not in reports or target not in reports:
        return rows
    for fam in sorted(reports[target].family_avg):
        a = reports[target].family_avg[fam]["mae_overall"]
        b = reports[base].family_avg[fam]["mae_overall"]
        rows.append({"family": fam, f"mae_{target}": a, f"mae_{base}": b,
                     "reduction": 1.0 - a / b if b > 0 else float("nan")})
    return rows


def run_ablation(cfg: dict, out: Path, n_jobs: int | None = None) -> dict:
    """Run every stage and write the bundle under ``out``.

    ``cfg`` must already be validated. Returns the manifest. A failing stage
    raises :class:`StageError`; files written by earlier stages are kept.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    n_jobs = default_jobs() if n_jobs is None else n_jobs
    h = config_hash(cfg)
    seed = int(cfg["seed"])
    _write_json(out / "config.json", {"config_hash": h, "config": cfg})

    with stage("data"):
        model = load_case(cfg["case"])
        Y = build_admittance(model)
        graph = GridGraph.from_model(model)
        snap_cfg = SnapshotSetConfig(**{**cfg["snapshots"], "rng_seed": seed})
        data = generate_snapshots(model, Y, snap_cfg, n_jobs=n_jobs)
        scales = residual_scales(data, Y)
        tr_idx, va_idx = train_val_split(len(data), seed, cfg["val_fraction"])
        tr_idx = _subset(tr_idx, cfg["train_subset"])
        train_set = data.subset(tr_idx)
        val_set = data.subset(va_idx)
        attack_src = val_set.subset(np.arange(len(val_set))[:cfg["attack_subset"]])
        _write_json(out / "data" / "summary.json", {
            "config_hash": h, "case": model.name, "n_bus": model.n_bus,
            "n_snapshots": len(data), "n_train": len(train_set), "n_val": len(val_set),
            "n_attack_source": len(attack_src), "residual_scales": asdict(scales)})
        if cfg["save_datasets"]:
            write_snapshots(data, out / "data" / "snapshots.csv")

    with stage("attacks"):
        zones = _zones(cfg, model, graph)
        families = {name: family_config(name, over) for name, over in cfg["families"].items()}
        feasible = FeasibleSetConfig(scales.tau_p, scales.tau_q, **cfg["feasible"])
        attacks, stats = generate_attack_dataset(
            attack_src, model, Y, zones, families, feasible, SolverConfig(**cfg["solver"]),
            seed=seed, n_jobs=n_jobs)
        empty = [f"{z}/{f}" for (z, f), d in attacks.items() if len(d) == 0]
        if empty:
            raise ValueError(f"no feasible samples for {empty}")
        _write_json(out / "attacks" / "summary.json", {
            "config_hash": h, "zones": [zone_summary(z, model) for z in zones],
            "stats": [st.to_dict() for st in stats.values()],
            "status_counts": status_counts(stats),
            "median_objective": {f"{z}/{f}": float(np.median(d.extra["objective"]))
                                 for (z, f), d in attacks.items()}})
        if cfg["save_datasets"]:
            for (z, f), d in attacks.items():
                write_snapshots(d, out / "attacks" / f"{z}_{f}.csv",
                                extra_columns=list(d.extra))

    base_train = TrainConfig(**{**cfg["train"], "rng_seed": seed})
    tr_data, va_data = Dataset.from_snapshots(train_set), Dataset.from_snapshots(val_set)
    models, states, traces = {}, {}, {}

    def _fit(regime, tcfg, frozen_s=None):
        params, u, trace = train(tr_data, tcfg, regime, Y, val_data=va_data,
                                 frozen_s=frozen_s)
        ck = out / "checkpoints" / f"{regime}.ckpt"
        ck.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ck, params, u, tcfg, regime, extra={"config_hash": h})
        tp = out / "traces" / f"{regime}.csv"
        tp.parent.mkdir(parents=True, exist_ok=True)
        trace.to_csv(tp)
        models[regime], states[regime], traces[regime] = params, u, trace

    regimes = cfg["regimes"]
    if "dynamic" in regimes:
        with stage("train_dynamic"):
            _fit("dynamic", base_train)
    if "fixed" in regimes:
        with stage("train_fixed"):
            fixed_cfg = base_train
            fs = cfg["fixed_search"]
            if fs["trials"] > 0:
                # search the static weights only; the architecture stays matched
                d = asdict(base_train)
                space = {"n_layers": (d["n_layers"],), "width": (d["width"], d["width"]),
                         "batch": (d["batch"], d["batch"]), "lr": (d["lr"], d["lr"]),
                         "lambda_r": (d["lambda_r"], d["lambda_r"])}
                best, trials = random_search(tr_data, va_data, Y, fs["trials"], seed,
                                             base_train, "fixed", space, fs["trial_epochs"])
                fixed_cfg = TrainConfig(**{**asdict(best), "epochs": base_train.epochs})
                _write_json(out / "search" / "fixed_trials.json", {
                    "config_hash": h,
                    "trials": [{"fixed_log_sigmas": list(t.config.fixed_log_sigmas),
                                "val_total": t.val_total, "status": t.status}
                               for t in trials],
                    "selected": list(fixed_cfg.fixed_log_sigmas)})
            _fit("fixed", fixed_cfg)
    if "frozen" in regimes:
        with stage("train_frozen"):
            _fit("frozen", base_train, frozen_s=states["dynamic"].s.copy())

    with stage("evaluate"):
        meta = {"config_hash": h, "perturbation_sign": PERTURBATION_SIGN}
        reports = {}
        for regime, params in models.items():
            metrics = [mae(params, val_set, "clean")]
            metrics += [mae(params, d, f"{z}_{f}", family=f, zone_id=z)
                        for (z, f), d in attacks.items()]
            reports[regime] = build_report(metrics, {**meta, "regime": regime})
            emit_report(reports[regime], out / "metrics" / regime)
        comp = comparison_table(reports)
        if comp:
            _write_json(out / "metrics" / "comparison.json",
                        {"config_hash": h, "rows": comp})
            _write_csv(out / "metrics" / "comparison.csv", list(comp[0]),
                       [list(r.values()) for r in comp])
        final = {r: {k: float(v) for k, v in traces[r].rows[-1].items()}
                 for r in traces if len(traces[r])}
        _write_json(out / "metrics" / "final_training.json",
                    {"config_hash": h, "final": final})

    sweep_rows = []
    if "dynamic" in models and cfg["sweep"]["levels"]:
        with stage("sweep"):
            sw = cfg["sweep"]
            sweep_set = val_set.subset(np.arange(len(val_set))[:sw["subset"]])
            sweep_rows = scaled_perturbation_eval(models["dynamic"], sweep_set, sw["levels"],
                                                  sw["bus_counts"], seed)
            _write_csv(out / "metrics" / "sweep.csv", list(sweep_rows[0]),
                       [list(r.values()) for r in sweep_rows])
            _write_json(out / "metrics" / "sweep.json",
                        {"config_hash": h, "perturbation_sign": PERTURBATION_SIGN,
                         "rows": sweep_rows})

    if cfg["figures"]:
        with stage("figures"):
            fig = out / "figures"
            plotting.loss_curves(traces, fig / "loss_curves.png", h)
            if "dynamic" in traces:
                plotting.weight_trajectories(traces["dynamic"], fig / "weights_dynamic.png", h)
            if reports:
                plotting.mae_bars(reports, fig / "mae_by_family_zone.png", h)
                plotting.percentile_bars(reports, fig / "mae_percentiles.png", h)
            if sweep_rows:
                plotting.sweep_plot(sweep_rows, fig / "sweep.png", h)
            if "dynamic" in models:
                errs = {}
                named = [("clean", val_set)] + [(f"{z}_{f}", d) for (z, f), d in attacks.items()]
                for name, d in named:
                    Vh, th = predict(models["dynamic"], d.inputs)
                    errs[name] = (np.abs(Vh - d.V).mean(0), np.abs(th - d.theta).mean(0))
                plotting.residuals_by_bus(errs, fig / "errors_by_bus.png", h)

    with stage("report"):
        files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
        manifest = {"schema": BUNDLE_SCHEMA, "config_hash": h,
                    "files": {p.relative_to(out).as_posix(): _sha256(p) for p in files}}
        _write_json(out / "manifest.json", manifest)
    log_event("summary", config_hash=h, n_files=len(manifest["files"]),
              regimes=sorted(models), datasets=len(attacks))
    return manifest
