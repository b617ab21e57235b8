"""``gridshield`` command-line interface.

Exit codes: 0 success, 2 configuration or usage error, 3 stage failure.
Logs go to stderr as one JSON object per line; results go to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config, set_path

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("gridshield")


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        msg = record.getMessage()
        try:
            body = json.loads(msg)
            if not isinstance(body, dict):
                body = {"msg": msg}
        except json.JSONDecodeError:
            body = {"msg": msg}
        return json.dumps({"level": record.levelname.lower(), "logger": record.name, **body},
                          sort_keys=True, default=str)


def setup_logging(verbose: int = 0) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("gridshield")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING)
    root.propagate = False


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _csv_floats(text: str, scale: float = 1.0) -> list[float]:
    return [float(v) * scale for v in text.split(",") if v.strip()]


def _config(args, extra: dict | None = None) -> dict:
    over = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError([f"--set expects key=value, got {item!r}"])
        key, val = item.split("=", 1)
        set_path(over, key.strip(), _parse_value(val))
    for k, v in (extra or {}).items():
        if v is not None:
            set_path(over, k, v)
    return load_config(getattr(args, "config", None), over)


def _emit_rows(rows: list[dict]) -> None:
    """Comma-delimited table on stdout."""
    if not rows:
        return
    cols = list(rows[0])
    print(",".join(cols))
    for r in rows:
        print(",".join(repr(float(r[c])) if isinstance(r[c], (float, np.floating))
                       else str(r[c]) for c in cols))


# ------------------------------------------------------------------ commands

def cmd_parse_case(args) -> int:
    from .case_model import build_admittance, load_case

    model = load_case(args.case)
    Y = build_admittance(model)
    print(f"case,{model.name}")
    print(f"buses,{model.n_bus}")
    print(f"branches,{len(model.branches)}")
    print(f"in_service_branches,{len(model.in_service_branches())}")
    print(f"generators,{len(model.gens)}")
    print(f"base_mva,{model.base_mva!r}")
    print(f"ybus_nnz,{Y.Y.nnz}")
    if args.dump:
        Path(args.dump).write_text(model.to_json() + "\n")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .case_model import build_admittance, load_case
    from .parallel import default_jobs
    from .powerflow import (SnapshotSetConfig, generate_snapshots, residual_scales,
                            write_dataset_dir)

    cfg = _config(args, {"case": args.case, "seed": args.seed,
                         "snapshots.n_samples": args.n_samples})
    model = load_case(cfg["case"])
    Y = build_admittance(model)
    snap = SnapshotSetConfig(**{**cfg["snapshots"], "rng_seed": cfg["seed"]})
    data = generate_snapshots(model, Y, snap, n_jobs=default_jobs())
    scales = residual_scales(data, Y) if len(data) else None
    write_dataset_dir(data, Path(args.out), snap, scales, meta={"case": cfg["case"]})
    print(f"snapshots,{len(data)}")
    if scales:
        print(f"tau_p,{scales.tau_p!r}")
        print(f"tau_q,{scales.tau_q!r}")
    return EXIT_OK


def cmd_gen_attacks(args) -> int:
    from .attackgen.dataset import generate_attack_dataset, status_counts
    from .attackgen.problem import FeasibleSetConfig, family_config
    from .attackgen.solver import SolverConfig
    from .attackgen.zones import default_zone_spec, load_zone_spec
    from .case_model import GridGraph, build_admittance, load_case
    from .parallel import default_jobs
    from .powerflow import read_dataset_dir, residual_scales, write_snapshots

    cfg = _config(args, {"seed": args.seed})
    data, meta = read_dataset_dir(Path(args.data))
    case = args.case or meta.get("case") or cfg["case"]
    model = load_case(case)
    Y = build_admittance(model)
    if data.n_bus != model.n_bus:
        raise ConfigError([f"dataset has {data.n_bus} buses, case {case} has {model.n_bus}"])
    if args.limit is not None:
        data = data.subset(np.arange(min(args.limit, len(data))))
    rs = meta.get("residual_scales") or asdict(residual_scales(data, Y))
    tau_p, tau_q = rs["tau_p"], rs["tau_q"]
    zspec = args.zones or (None if cfg["zones"] == "default" else cfg["zones"])
    zones = load_zone_spec(zspec or default_zone_spec(), model, GridGraph.from_model(model))
    names = args.families.split(",") if args.families else list(cfg["families"])
    families = {n: family_config(n, cfg["families"].get(n, {})) for n in names}
    feasible = FeasibleSetConfig(tau_p, tau_q, **cfg["feasible"])
    datasets, stats = generate_attack_dataset(data, model, Y, zones, families, feasible,
                                              SolverConfig(**cfg["solver"]), cfg["seed"],
                                              default_jobs())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for (z, f), d in datasets.items():
        write_snapshots(d, out / f"{z}_{f}.csv", extra_columns=list(d.extra))
        st = stats[(z, f)]
        rows.append({"zone_id": z, "family": f, "attempted": st.attempted,
                     "emitted": st.emitted, "yield": st.yield_rate,
                     "median_objective": float(np.median(d.extra["objective"]))
                     if len(d) else float("nan")})
    (out / "attacks.json").write_text(json.dumps(
        {"tau_p": tau_p, "tau_q": tau_q, "stats": [s.to_dict() for s in stats.values()],
         "status_counts": status_counts(stats)}, indent=1, sort_keys=True) + "\n")
    _emit_rows(rows)
    return EXIT_OK


def cmd_train(args) -> int:
    from .case_model import build_admittance, load_case
    from .evaluate import config_hash
    from .pinn.train import Dataset, TrainConfig, load_checkpoint, save_checkpoint, train
    from .powerflow import read_dataset_dir, train_val_split

    cfg = _config(args, {"seed": args.seed, "train.epochs": args.epochs})
    data, meta = read_dataset_dir(Path(args.data))
    model = load_case(args.case or meta.get("case") or cfg["case"])
    Y = build_admittance(model)
    tr, va = train_val_split(len(data), cfg["seed"], cfg["val_fraction"])
    if cfg["train_subset"] is not None:
        tr = tr[:cfg["train_subset"]]
    tcfg = TrainConfig(**{**cfg["train"], "rng_seed": cfg["seed"]})
    frozen_s = None
    if args.regime == "frozen":
        if not args.frozen_from:
            raise ConfigError(["--regime frozen needs --frozen-from <dynamic checkpoint>"])
        frozen_s = load_checkpoint(args.frozen_from)[1].s
    params, u, trace = train(Dataset.from_snapshots(data.subset(tr)), tcfg, args.regime, Y,
                             val_data=Dataset.from_snapshots(data.subset(va)),
                             frozen_s=frozen_s)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, params, u, tcfg, args.regime, extra={"config_hash": config_hash(cfg)})
    trace.to_csv(out.with_suffix(".trace.csv"))
    last = trace.rows[-1] if len(trace) else {}
    _emit_rows([{k: last[k] for k in ("epoch", "total", "ratio", "val_total")}] if last else [])
    return EXIT_OK


def cmd_search(args) -> int:
    from .case_model import build_admittance, load_case
    from .pinn.train import Dataset, TrainConfig, random_search
    from .powerflow import read_dataset_dir, train_val_split

    cfg = _config(args, {"seed": args.seed})
    data, meta = read_dataset_dir(Path(args.data))
    model = load_case(args.case or meta.get("case") or cfg["case"])
    Y = build_admittance(model)
    tr, va = train_val_split(len(data), cfg["seed"], cfg["val_fraction"])
    if cfg["train_subset"] is not None:
        tr = tr[:cfg["train_subset"]]
    base = TrainConfig(**{**cfg["train"], "rng_seed": cfg["seed"]})
    best, trials = random_search(Dataset.from_snapshots(data.subset(tr)),
                                 Dataset.from_snapshots(data.subset(va)), Y, args.trials,
                                 cfg["seed"], base, args.regime,
                                 trial_epochs=args.trial_epochs)
    rows = [{"trial": k, "n_layers": t.config.n_layers, "width": t.config.width,
             "batch": t.config.batch, "lr": t.config.lr, "lambda_r": t.config.lambda_r,
             "val_total": t.val_total, "status": t.status} for k, t in enumerate(trials)]
    if args.out:
        Path(args.out).write_text(json.dumps({"best": asdict(best), "trials": rows},
                                             indent=1, sort_keys=True, default=list) + "\n")
    _emit_rows(rows)
    return EXIT_OK


def _datasets(paths: list[str]):
    """``(name, family, zone_id, SnapshotSet)`` for each dataset path."""
    from .powerflow import read_dataset_dir

    out = []
    for p in paths:
        data, _ = read_dataset_dir(Path(p))
        fam = data.extra.get("family", [""])[0] if len(data) else ""
        zone = data.extra.get("zone_id", [""])[0] if len(data) else ""
        name = Path(p).stem if Path(p).is_file() else Path(p).name
        out.append((name, str(fam), str(zone), data))
    return out


def cmd_evaluate(args) -> int:
    from . import plotting
    from .evaluate import PERTURBATION_SIGN, build_report, emit_report, mae
    from .pinn.train import load_checkpoint

    params, _, _, header = load_checkpoint(args.model)
    metrics = [mae(params, d, name, fam, zone) for name, fam, zone, d in _datasets(args.data)]
    h = header.get("config_hash", "")
    report = build_report(metrics, {"config_hash": h, "regime": header["regime"],
                                    "perturbation_sign": PERTURBATION_SIGN})
    jpath, cpath = emit_report(report, Path(args.out))
    if args.figures and report.family_avg:
        fig = Path(args.figures)
        plotting.mae_bars({header["regime"]: report}, fig / "mae_by_family_zone.png", h)
        plotting.percentile_bars({header["regime"]: report}, fig / "mae_percentiles.png", h)
    sys.stdout.write(cpath.read_text())
    return EXIT_OK


def cmd_perturb_sweep(args) -> int:
    from . import plotting
    from .evaluate import scaled_perturbation_eval
    from .pinn.train import load_checkpoint

    params, _, _, header = load_checkpoint(args.model)
    (_, _, _, data), = _datasets([args.data])
    if args.limit is not None:
        data = data.subset(np.arange(min(args.limit, len(data))))
    levels = _csv_floats(args.levels, 0.01)
    buses = [int(b) for b in _csv_floats(args.buses)]
    rows = scaled_perturbation_eval(params, data, levels, buses, args.seed)
    if args.out:
        import csv

        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(rows[0]))
            for r in rows:
                w.writerow([repr(float(v)) for v in r.values()])
    if args.figures:
        plotting.sweep_plot(rows, Path(args.figures) / "sweep.png",
                            header.get("config_hash", ""))
    _emit_rows(rows)
    return EXIT_OK


def cmd_ablation(args) -> int:
    from .pipeline import run_ablation

    cfg = _config(args, {"seed": args.seed})
    manifest = run_ablation(cfg, Path(args.out))
    out = Path(args.out)
    comp = out / "metrics" / "comparison.json"
    print(f"config_hash,{manifest['config_hash']}")
    print(f"files,{len(manifest['files'])}")
    if comp.exists():
        _emit_rows(json.loads(comp.read_text())["rows"])
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridshield", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="-v for stage events, -vv for debug")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="pipeline config JSON")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=30")
        sp.add_argument("--seed", type=int)
        return sp

    sp = sub.add_parser("parse-case", help="parse a MATPOWER case and print a summary")
    sp.add_argument("--case", default="case118", help="case file or builtin name")
    sp.add_argument("--dump", help="write the parsed model as JSON")
    sp.set_defaults(fn=cmd_parse_case)

    sp = with_config(sub.add_parser("gen-data", help="generate clean snapshots"))
    sp.add_argument("--case")
    sp.add_argument("--n-samples", type=int)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(fn=cmd_gen_data)

    sp = with_config(sub.add_parser("gen-attacks", help="generate attacked datasets"))
    sp.add_argument("--data", required=True, help="clean dataset directory")
    sp.add_argument("--case")
    sp.add_argument("--zones", help="zone spec JSON (default: shipped IEEE 118 zones)")
    sp.add_argument("--families", help="comma-separated families (default: all)")
    sp.add_argument("--limit", type=int, help="use only the first N clean rows")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_attacks)

    sp = with_config(sub.add_parser("train", help="train one regime"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--case")
    sp.add_argument("--regime", choices=("dynamic", "fixed", "frozen"), default="dynamic")
    sp.add_argument("--frozen-from", help="dynamic checkpoint supplying s for --regime frozen")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.set_defaults(fn=cmd_train)

    sp = with_config(sub.add_parser("search", help="random hyperparameter search"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--case")
    sp.add_argument("--trials", type=int, required=True)
    sp.add_argument("--trial-epochs", type=int, default=5)
    sp.add_argument("--regime", choices=("dynamic", "fixed"), default="dynamic")
    sp.add_argument("--out", help="write trials and best config as JSON")
    sp.set_defaults(fn=cmd_search)

    sp = sub.add_parser("evaluate", help="MAE report of a checkpoint on datasets")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True, nargs="+", help="dataset dirs or CSV files")
    sp.add_argument("--out", required=True, help="report path (.json and .csv written)")
    sp.add_argument("--figures", help="directory for MAE figures")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("perturb-sweep", help="scaled data-manipulation sweep")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--levels", default="5,10,20,30", help="percent levels")
    sp.add_argument("--buses", default="1,10", help="attacked-bus counts")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--limit", type=int, help="use only the first N rows")
    sp.add_argument("--out", help="CSV output path")
    sp.add_argument("--figures", help="directory for the sweep figure")
    sp.set_defaults(fn=cmd_perturb_sweep)

    sp = with_config(sub.add_parser("ablation", help="end-to-end dynamic/fixed/frozen run"))
    sp.add_argument("--out", required=True, help="bundle directory")
    sp.set_defaults(fn=cmd_ablation)
    return p


def main(argv=None) -> int:
    from .attackgen.zones import ZoneError
    from .case_model import CaseError
    from .pipeline import StageError

    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.fn(args)
    except (ConfigError, CaseError, ZoneError) as exc:
        log.error(json.dumps({"event": "config_error", "error": str(exc)}))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        log.error(json.dumps({"event": "stage_failed", "stage": exc.stage, "error": str(exc)}))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        log.error(json.dumps({"event": "failed", "command": args.command, "error": str(exc)}))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
