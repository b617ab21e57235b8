"""Minibatch Adam training for the dynamic / fixed / frozen regimes."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import MlpParams, init_params
from .objective import (EPS_NORM, EPS_RATIO, REGIMES, GradientError,
                        UncertaintyState, component_losses, dynamic_objective,
                        gradients)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_layers: int = 2
    width: int = 256
    batch: int = 64
    lr: float = 1e-3
    lambda_r: float = 0.1
    epochs: int = 100
    eps_norm: float = EPS_NORM
    eps_ratio: float = EPS_RATIO
    rng_seed: int = 0
    fixed_log_sigmas: tuple = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        self.fixed_log_sigmas = tuple(float(s) for s in self.fixed_log_sigmas)
        errors = validate_train_config(self)
        if errors:
            raise ValueError("; ".join(errors))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def validate_train_config(cfg: TrainConfig) -> list[str]:
    errs = []
    if cfg.n_layers not in (2, 4, 6):
        errs.append(f"n_layers {cfg.n_layers} not in {{2, 4, 6}}")
    if not 64 <= cfg.width <= 4096:
        errs.append(f"width {cfg.width} out of [64, 4096]")
    if not 32 <= cfg.batch <= 128:
        errs.append(f"batch {cfg.batch} out of [32, 128]")
    if not 1e-5 <= cfg.lr <= 1e-3:
        errs.append(f"lr {cfg.lr} out of [1e-5, 1e-3]")
    if not 1e-4 <= cfg.lambda_r <= 10:
        errs.append(f"lambda_r {cfg.lambda_r} out of [1e-4, 10]")
    if cfg.epochs < 0:
        errs.append("epochs must be >= 0")
    if len(cfg.fixed_log_sigmas) != 4 or any(not -5 <= s <= 5 for s in cfg.fixed_log_sigmas):
        errs.append(f"fixed_log_sigmas {cfg.fixed_log_sigmas} must be 4 values in [-5, 5]")
    if cfg.eps_norm <= 0 or cfg.eps_ratio <= 0:
        errs.append("eps_norm and eps_ratio must be positive")
    return errs


TRACE_COLUMNS = ("epoch", "total", "L_p", "L_q", "L_v", "L_theta", "w_p", "w_q",
                 "w_v", "w_theta", "W_phys", "W_data", "ratio", "s_p", "s_q", "s_v",
                 "s_theta", "val_total")


@dataclass
class TrainTrace:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in TRACE_COLUMNS[1:]])

    @classmethod
    def from_csv(cls, path: Path) -> "TrainTrace":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()}
                    for r in rows])


class Adam:
    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            out.append(p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps))
        return out


@dataclass
class Dataset:
    """Estimator training arrays: inputs ``[P, Q]`` and state labels."""
    y: np.ndarray
    V: np.ndarray
    theta: np.ndarray

    @classmethod
    def from_snapshots(cls, snaps) -> "Dataset":
        return cls(snaps.inputs, snaps.V, snaps.theta)

    def __len__(self):
        return len(self.y)

    def batch(self, idx):
        return self.y[idx], self.V[idx], self.theta[idx]


def initial_state(regime: str, cfg: TrainConfig, frozen_s=None) -> UncertaintyState:
    if regime == "dynamic":
        return UncertaintyState(np.zeros(4), regime="dynamic")
    if regime == "fixed":
        return UncertaintyState(np.array(cfg.fixed_log_sigmas), regime="fixed")
    if regime == "frozen":
        if frozen_s is None:
            raise ValueError("frozen regime needs the final s of a dynamic run")
        return UncertaintyState(np.array(frozen_s, dtype=float), regime="frozen")
    raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")


def evaluate_objective(data: Dataset, params: MlpParams, u: UncertaintyState,
                       cfg: TrainConfig, inj: ad.InjectionOp) -> float:
    """Mean minibatch objective over ``data`` in fixed order (no updates)."""
    totals = []
    for start in range(0, len(data), cfg.batch):
        idx = np.arange(start, min(start + cfg.batch, len(data)))
        L = component_losses(*data.batch(idx), params, inj, cfg.eps_norm)
        totals.append(dynamic_objective(L, u, cfg.lambda_r, cfg.eps_ratio)[0])
    return float(np.mean(totals)) if totals else float("nan")


def train(train_data: Dataset, cfg: TrainConfig, regime: str, Y,
          val_data: Dataset | None = None, frozen_s=None,
          params: MlpParams | None = None, callback=None):
    """Train the estimator.

    Returns ``(params, state, trace)``. The trace has one row per epoch
    holding epoch-mean losses and the end-of-epoch weights.

    Raises
    ------
    TrainingError
        On a non-finite loss or gradient, naming epoch and batch.
    """
    rng = np.random.default_rng([cfg.rng_seed, 1])
    inj = ad.InjectionOp(Y)
    if params is None:
        params = init_params(train_data.y.shape[1] // 2, cfg.n_layers, cfg.width,
                             rng, train_data.y, train_data.V, train_data.theta)
    u = initial_state(regime, cfg, frozen_s)
    trace = TrainTrace()
    if cfg.epochs == 0:
        return params, u, trace
    arrays = params.trainable()
    opt = Adam([a.shape for a in arrays] + [(4,)], cfg.lr)
    n = len(train_data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(5)
        count = 0
        for b, start in enumerate(range(0, n, cfg.batch)):
            idx = order[start:start + cfg.batch]
            try:
                ev = gradients(*train_data.batch(idx), params, u, inj, cfg.lambda_r,
                               cfg.eps_norm, cfg.eps_ratio)
            except GradientError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            updated = opt.step(arrays + [u.s], ev.d_params + [ev.d_s])
            arrays = updated[:-1]
            if u.trainable:
                u.s = updated[-1]
            params = params.with_trainable(arrays)
            sums += np.r_[ev.total, ev.losses]
            count += 1
        means = sums / count
        if not np.all(np.isfinite(means)):
            raise TrainingError(f"epoch {epoch}: non-finite epoch loss")
        w = u.weights
        w_phys, w_data, ratio = u.balance(cfg.eps_ratio)
        row = {"epoch": epoch, "total": means[0], "L_p": means[1], "L_q": means[2],
               "L_v": means[3], "L_theta": means[4], "w_p": w[0], "w_q": w[1],
               "w_v": w[2], "w_theta": w[3], "W_phys": w_phys, "W_data": w_data,
               "ratio": ratio, "s_p": u.s[0], "s_q": u.s[1], "s_v": u.s[2],
               "s_theta": u.s[3],
               "val_total": (evaluate_objective(val_data, params, u, cfg, inj)
                             if val_data is not None and len(val_data) else float("nan"))}
        trace.rows.append(row)
        log.debug("epoch %d total %.6g ratio %.4g", epoch, row["total"], ratio)
        if callback is not None:
            callback(row)
    return params, u, trace


# ---------------------------------------------------------------- search

DEFAULT_SPACE = {
    "n_layers": (2, 4, 6),
    "width": (64, 4096),
    "batch": (32, 128),
    "lr": (1e-5, 1e-3),
    "lambda_r": (1e-4, 10.0),
    "fixed_log_sigmas": (-5.0, 5.0),
}


def sample_config(rng: np.random.Generator, space: dict, base: TrainConfig,
                  regime: str) -> TrainConfig:
    d = asdict(base)
    d["n_layers"] = int(rng.choice(space["n_layers"]))
    d["width"] = int(rng.integers(space["width"][0], space["width"][1] + 1))
    d["batch"] = int(rng.integers(space["batch"][0], space["batch"][1] + 1))
    lo, hi = np.log(space["lr"][0]), np.log(space["lr"][1])
    # exp(log(x)) can land one ulp outside the range
    d["lr"] = float(np.clip(np.exp(rng.uniform(lo, hi)), *space["lr"]))
    d["lambda_r"] = float(rng.uniform(*space["lambda_r"]))
    if regime == "fixed":
        d["fixed_log_sigmas"] = tuple(float(v) for v in rng.uniform(*space["fixed_log_sigmas"], 4))
    return TrainConfig(**d)


@dataclass
class Trial:
    config: TrainConfig
    val_total: float
    status: str


def random_search(train_data: Dataset, val_data: Dataset, Y, n_trials: int,
                  seed: int, base: TrainConfig | None = None, regime: str = "dynamic",
                  space: dict | None = None, trial_epochs: int = 5):
    """Seeded uniform search (log-uniform lr); returns ``(best, trials)``.

    Each trial trains for ``trial_epochs`` and is scored by the mean
    validation objective. Diverged trials are discarded.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    base = base or TrainConfig()
    space = {**DEFAULT_SPACE, **(space or {})}
    rng = np.random.default_rng([seed, 2])
    trials = []
    for k in range(n_trials):
        cfg = sample_config(rng, space, base, regime)
        short = TrainConfig(**{**asdict(cfg), "epochs": trial_epochs})
        try:
            params, u, _ = train(train_data, short, regime, Y)
            score = evaluate_objective(val_data, params, u, short, ad.InjectionOp(Y))
            status = "ok" if math.isfinite(score) else "diverged"
        except (TrainingError, FloatingPointError) as exc:
            log.info("trial %d diverged: %s", k, exc)
            score, status = float("nan"), "diverged"
        trials.append(Trial(cfg, score, status))
    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        raise TrainingError(f"all {n_trials} search trials diverged")
    best = min(ok, key=lambda t: t.val_total)
    return best.config, trials


# ------------------------------------------------------------ checkpoints

_MAGIC = b"GSCKPT01"


def save_checkpoint(path: Path, params: MlpParams, state: UncertaintyState,
                    cfg: TrainConfig, regime: str, extra: dict | None = None) -> None:
    """Write ``magic | u64 header length | JSON header | float64 LE blob``."""
    arrays = params.trainable() + [params.in_shift, params.in_scale,
                                   params.out_shift, params.out_scale]
    header = {
        "format": "gridshield-checkpoint/1",
        "shapes": [list(a.shape) for a in arrays],
        "order": "W0,b0,...,Wk,bk,in_shift,in_scale,out_shift,out_scale",
        "config": asdict(cfg),
        "regime": regime,
        "s": [float(v) for v in state.s],
        "s_bounds": [state.s_min, state.s_max],
    }
    header.update(extra or {})
    head = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(blob)


def load_checkpoint(path: Path):
    """Returns ``(params, state, cfg, header)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path} is not a gridshield checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    data = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    arrays, pos = [], 0
    for shape in header["shapes"]:
        size = int(np.prod(shape))
        arrays.append(data[pos:pos + size].reshape(shape).astype(float))
        pos += size
    train_arrays, io = arrays[:-4], arrays[-4:]
    params = MlpParams(list(train_arrays[0::2]), list(train_arrays[1::2]), *io)
    state = UncertaintyState(np.array(header["s"]), *header["s_bounds"],
                             regime=header["regime"])
    cfg = TrainConfig.from_dict(header["config"])
    return params, state, cfg, header
