"""Fully-connected estimator ``[P, Q] -> (P_hat, Q_hat, V_hat, theta_hat)``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class MlpParams:
    """Weights of a uniform-width swish MLP plus fixed affine I/O scaling.

    The scaling arrays default to the identity; :func:`init_params` can
    fit them to training statistics. They are constants, not trained.
    """
    weights: list
    biases: list
    in_shift: np.ndarray = None
    in_scale: np.ndarray = None
    out_shift: np.ndarray = None
    out_scale: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d_in = self.weights[0].shape[0]
        d_out = self.weights[-1].shape[1]
        if d_in % 2 or d_out != 2 * d_in:
            raise ValueError(f"expected input 2n and output 4n, got {d_in}->{d_out}")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError(f"layer shapes do not chain: {a.shape} -> {b.shape}")
        if self.in_shift is None:
            self.in_shift = np.zeros(d_in)
        if self.in_scale is None:
            self.in_scale = np.ones(d_in)
        if self.out_shift is None:
            self.out_shift = np.zeros(d_out)
        if self.out_scale is None:
            self.out_scale = np.ones(d_out)

    @property
    def n_bus(self) -> int:
        return self.weights[0].shape[0] // 2

    @property
    def n_hidden(self) -> int:
        return len(self.weights) - 1

    @property
    def width(self) -> int:
        return self.weights[0].shape[1]

    def trainable(self) -> list:
        """Weights and biases interleaved layer by layer."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_trainable(self, arrays) -> "MlpParams":
        return MlpParams(list(arrays[0::2]), list(arrays[1::2]), self.in_shift,
                         self.in_scale, self.out_shift, self.out_scale, dict(self.meta))

    def copy(self) -> "MlpParams":
        return self.with_trainable([a.copy() for a in self.trainable()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.trainable())


def _scale_stats(x: np.ndarray, floor: float = 1e-3):
    mu = x.mean(axis=0)
    sd = np.maximum(x.std(axis=0), floor)
    return mu, sd


def init_params(n_bus: int, n_layers: int, width: int, rng: np.random.Generator,
                inputs: np.ndarray | None = None, V: np.ndarray | None = None,
                theta: np.ndarray | None = None) -> MlpParams:
    """Glorot-uniform init; optional data arrays fit the I/O scaling.

    ``n_layers`` counts hidden layers.
    """
    dims = [2 * n_bus] + [width] * n_layers + [4 * n_bus]
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (d_in + d_out))
        weights.append(rng.uniform(-lim, lim, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    params = MlpParams(weights, biases)
    if inputs is not None:
        params.in_shift, params.in_scale = _scale_stats(inputs)
        out_mu = np.concatenate([params.in_shift, _scale_stats(V)[0],
                                 _scale_stats(theta)[0]])
        out_sd = np.concatenate([params.in_scale, _scale_stats(V)[1],
                                 _scale_stats(theta)[1]])
        params.out_shift, params.out_scale = out_mu, out_sd
    return params


def _split(out, n):
    return out[..., :n], out[..., n:2 * n], out[..., 2 * n:3 * n], out[..., 3 * n:]


def forward(params: MlpParams, y) -> tuple:
    """Deterministic forward pass; ``y`` is ``(2n,)`` or a batch ``(k, 2n)``."""
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != 2 * params.n_bus:
        raise ValueError(f"input has {y.shape[-1]} features, expected {2 * params.n_bus}")
    h = (y - params.in_shift) / params.in_scale
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        z = h @ W + b
        h = z * ad._sigmoid(z.reshape(-1)).reshape(z.shape)
    out = (h @ params.weights[-1] + params.biases[-1]) * params.out_scale + params.out_shift
    return _split(out, params.n_bus)


def forward_tape(params: MlpParams, leaves: list, y: np.ndarray):
    """Forward pass on the tape; ``leaves`` mirror ``params.trainable()``."""
    n = params.n_bus
    h = ad.lift((np.atleast_2d(y) - params.in_shift) / params.in_scale)
    Ws, bs = leaves[0::2], leaves[1::2]
    for W, b in zip(Ws[:-1], bs[:-1]):
        h = ad.swish(ad.affine(h, W, b))
    out = ad.affine(h, Ws[-1], bs[-1]) * params.out_scale + params.out_shift
    return tuple(out[:, k * n:(k + 1) * n] for k in range(4))
