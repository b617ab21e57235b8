"""Pipeline configuration: defaults, loading and validation."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, fields
from pathlib import Path

from .attackgen.problem import FAMILIES, family_config
from .attackgen.solver import SolverConfig
from .pinn.objective import REGIMES
from .pinn.train import TrainConfig
from .powerflow import SnapshotSetConfig

FEASIBLE_KEYS = ("eps_bnd_rel", "eps_bnd_abs", "v_min", "v_max", "theta_min", "theta_max",
                 "cons_rel", "cons_abs")


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _without_seed(obj) -> dict:
    d = asdict(obj)
    d.pop("rng_seed")
    return d


def default_config() -> dict:
    """Full-scale defaults: IEEE 118, three zones, four families, 100 epochs.

    ``attack_subset`` and ``train_subset`` of ``None`` mean "all rows". The
    global ``seed`` drives every RNG stream (snapshots, split, attacks,
    initialization, shuffling, search, sweep).
    """
    return {
        "seed": 0,
        "case": "case118",
        "zones": "default",
        "snapshots": _without_seed(SnapshotSetConfig()),
        "val_fraction": 0.1,
        "train_subset": None,
        "attack_subset": None,
        "families": {name: {} for name in FAMILIES},
        "feasible": {"eps_bnd_rel": 0.03, "eps_bnd_abs": 0.01, "v_min": 0.95, "v_max": 1.05,
                     "theta_min": -3.141592653589793, "theta_max": 3.141592653589793,
                     "cons_rel": 1e-3, "cons_abs": 1e-3},
        "solver": asdict(SolverConfig()),
        "train": _without_seed(TrainConfig()),
        "regimes": list(REGIMES),
        "fixed_search": {"trials": 0, "trial_epochs": 5},
        "sweep": {"levels": [0.05, 0.10, 0.20, 0.30], "bus_counts": [1, 10], "subset": 200},
        "save_datasets": False,
        "figures": True,
    }


def _unknown(section: str, given: dict, allowed) -> list[str]:
    return [f"unknown key {section}{k}" for k in sorted(set(given) - set(allowed))]


def _check_dataclass(section: str, cls, given: dict) -> list[str]:
    errs = _unknown(section + ".", given, {f.name for f in fields(cls)} - {"rng_seed"})
    if errs:
        return errs
    try:
        cls(**given)
    except (TypeError, ValueError) as exc:
        return [f"{section}: {exc}"]
    return []


def validate_config(cfg: dict, check_paths: bool = True) -> list[str]:
    """Every range/key violation in ``cfg``; empty when valid."""
    base = default_config()
    errs = _unknown("", cfg, base)
    if errs:
        return errs
    cfg = {**base, **cfg}
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        errs.append("seed must be a non-negative integer")
    errs += _check_dataclass("snapshots", SnapshotSetConfig, cfg["snapshots"])
    if not 0 < cfg["val_fraction"] < 1:
        errs.append("val_fraction must be in (0, 1)")
    for key in ("train_subset", "attack_subset"):
        v = cfg[key]
        if v is not None and (not isinstance(v, int) or v < 0):
            errs.append(f"{key} must be null or a non-negative integer")
    fams = cfg["families"]
    if not isinstance(fams, dict) or not fams:
        errs.append("families must be a non-empty mapping")
    else:
        for name, over in fams.items():
            try:
                family_config(name, over)
            except ValueError as exc:
                errs.append(str(exc))
    errs += _unknown("feasible.", cfg["feasible"], FEASIBLE_KEYS)
    f = {**base["feasible"], **cfg["feasible"]}
    if not f["v_min"] < f["v_max"] or not f["theta_min"] < f["theta_max"]:
        errs.append("feasible: state bounds must satisfy min < max")
    if min(f["eps_bnd_rel"], f["eps_bnd_abs"], f["cons_rel"], f["cons_abs"]) <= 0:
        errs.append("feasible: tolerances must be > 0")
    errs += _check_dataclass("solver", SolverConfig, cfg["solver"])
    errs += _check_dataclass("train", TrainConfig, cfg["train"])
    bad = [r for r in cfg["regimes"] if r not in REGIMES]
    if bad:
        errs.append(f"unknown regimes {bad}")
    if "frozen" in cfg["regimes"] and "dynamic" not in cfg["regimes"]:
        errs.append("frozen regime needs the dynamic regime")
    errs += _unknown("fixed_search.", cfg["fixed_search"], base["fixed_search"])
    if cfg["fixed_search"].get("trials", 0) < 0:
        errs.append("fixed_search.trials must be >= 0")
    errs += _unknown("sweep.", cfg["sweep"], base["sweep"])
    if any(lv < 0 for lv in cfg["sweep"].get("levels", [])):
        errs.append("sweep.levels must be >= 0")
    if any(k < 1 for k in cfg["sweep"].get("bus_counts", [])):
        errs.append("sweep.bus_counts must be >= 1")
    if check_paths:
        for key in ("case", "zones"):
            v = cfg[key]
            if isinstance(v, str) and v not in ("case118", "case4gs", "default") \
                    and not Path(v).exists():
                errs.append(f"{key}: path not found: {v}")
    return errs


def merge(base: dict, over: dict) -> dict:
    """Recursive dict merge (``over`` wins); lists are replaced."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "families":
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: Path | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file, then overrides; raises :class:`ConfigError`."""
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"]) from None
        errs = _unknown("", user, cfg)
        if errs:
            raise ConfigError(errs)
        cfg = merge(cfg, user)
    cfg = merge(cfg, overrides or {})
    errs = validate_config(cfg)
    if errs:
        raise ConfigError(errs)
    return cfg


def set_path(cfg: dict, dotted: str, value) -> None:
    """Set ``a.b.c`` in a nested dict (for ``--set`` style CLI overrides)."""
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
