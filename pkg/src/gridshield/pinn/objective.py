"""Normalized losses and the clipped homoscedastic-uncertainty objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import MlpParams, forward_tape

COMPONENTS = ("p", "q", "v", "theta")
REGIMES = ("dynamic", "fixed", "frozen")
S_MIN, S_MAX = -4.0, 2.0
EPS_NORM = 1e-8
EPS_RATIO = 1e-12


class GradientError(FloatingPointError):
    pass


@dataclass
class UncertaintyState:
    """Log-uncertainties ``s`` in the order (p, q, v, theta).

    The stored values are unconstrained; clipping to ``[s_min, s_max]``
    happens inside the objective.
    """
    s: np.ndarray = field(default_factory=lambda: np.zeros(4))
    s_min: float = S_MIN
    s_max: float = S_MAX
    regime: str = "dynamic"

    def __post_init__(self):
        self.s = np.array(self.s, dtype=float).reshape(4)
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if not self.s_min < self.s_max:
            raise ValueError("s_min must be < s_max")

    @property
    def trainable(self) -> bool:
        return self.regime == "dynamic"

    @property
    def s_clip(self) -> np.ndarray:
        return np.clip(self.s, self.s_min, self.s_max)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(-2.0 * self.s_clip)

    def balance(self, eps_ratio: float = EPS_RATIO) -> tuple[float, float, float]:
        w = self.weights
        w_phys, w_data = w[0] + w[1], w[2] + w[3]
        return w_phys, w_data, w_phys / (w_data + eps_ratio)


def _is_tensor(*xs) -> bool:
    return any(isinstance(x, ad.Tensor) for x in xs)


def _normalized(a, b, eps_norm):
    a, b = ad.lift(a), ad.lift(b)
    sigma = ad.std(a)
    return ad.mean(ad.square((a - b) / (sigma + eps_norm)))


def normalized_loss(a, b, eps_norm: float = EPS_NORM):
    """Mean squared difference scaled by the population std of ``a``.

    The std is taken over every entry of the reference block, so for a
    minibatch ``(k, n)`` this is the batch-mean of per-sample losses that
    share one set of minibatch moments. Returns a float for array inputs
    and a tape node for :class:`~gridshield.pinn.autodiff.Tensor` inputs.
    """
    out = _normalized(a, b, eps_norm)
    return out if _is_tensor(a, b) else float(out.value)


def _component_losses(params, leaves, y, V, theta, inj, eps_norm):
    P_hat, Q_hat, V_hat, th_hat = forward_tape(params, leaves, y)
    P_inj, Q_inj = inj(V_hat, th_hat)
    return (_normalized(P_hat, P_inj, eps_norm),
            _normalized(Q_hat, Q_inj, eps_norm),
            _normalized(np.atleast_2d(V), V_hat, eps_norm),
            _normalized(np.atleast_2d(theta), th_hat, eps_norm))


def component_losses(y, V, theta, params: MlpParams, inj: ad.InjectionOp,
                     eps_norm: float = EPS_NORM) -> np.ndarray:
    """``(L_p, L_q, L_v, L_theta)`` for a minibatch of inputs and state labels."""
    if len(np.atleast_2d(y)) == 0:
        raise ValueError("empty batch")
    leaves = [ad.lift(a) for a in params.trainable()]
    out = _component_losses(params, leaves, y, V, theta, inj, eps_norm)
    return np.array([float(t.value) for t in out])


def _objective(losses, s, s_min, s_max, lambda_r, eps_ratio):
    s_clip = ad.clip(s, s_min, s_max)
    w = ad.exp(s_clip * -2.0)
    L = ad.lift(losses)
    j_dyn = ad.sum(w * L * 0.5 + s_clip)
    w_phys = w[0] + w[1]
    w_data = w[2] + w[3]
    r = w_phys / (w_data + eps_ratio)
    r_star = 1.0  # two physics terms, two data terms
    delta = np.log(r_star + eps_ratio) - ad.log(r + eps_ratio)
    p_ratio = ad.square(ad.relu(delta)) * lambda_r
    total = j_dyn + p_ratio
    return total, {"J_dyn": j_dyn, "P_ratio": p_ratio, "W_phys": w_phys,
                   "W_data": w_data, "ratio": r, "delta": delta, "w": w}


def dynamic_objective(losses, u: UncertaintyState, lambda_r: float,
                      eps_ratio: float = EPS_RATIO):
    """Total training objective and its named parts.

    ``losses`` holds ``(L_p, L_q, L_v, L_theta)``. Returns ``(total, parts)``
    with ``parts`` keys ``J_dyn``, ``P_ratio``, ``W_phys``, ``W_data``,
    ``ratio``, ``delta`` and ``w`` (per-component weights).
    """
    total, parts = _objective(np.asarray(losses, dtype=float), u.s, u.s_min,
                              u.s_max, lambda_r, eps_ratio)
    out = {k: (v.value.copy() if k == "w" else float(v.value)) for k, v in parts.items()}
    return float(total.value), out


@dataclass
class Evaluation:
    total: float
    losses: np.ndarray
    parts: dict
    d_params: list
    d_s: np.ndarray


def gradients(y, V, theta, params: MlpParams, u: UncertaintyState,
              inj: ad.InjectionOp, lambda_r: float, eps_norm: float = EPS_NORM,
              eps_ratio: float = EPS_RATIO) -> Evaluation:
    """Objective value and exact reverse-mode gradients for one minibatch.

    ``d_s`` is identically zero unless the regime is dynamic.

    Raises
    ------
    GradientError
        If the objective or any gradient is non-finite.
    """
    leaves = [ad.leaf(a) for a in params.trainable()]
    s_leaf = ad.leaf(u.s) if u.trainable else ad.lift(u.s)
    comps = _component_losses(params, leaves, y, V, theta, inj, eps_norm)
    L = ad.stack(comps)
    total, parts = _objective(L, s_leaf, u.s_min, u.s_max, lambda_r, eps_ratio)
    if not np.isfinite(total.value):
        bad = [m for m, c in zip(COMPONENTS, comps) if not np.isfinite(c.value)]
        raise GradientError(f"non-finite objective (components: {bad or 'weights'})")
    total.backward()
    d_params = [l.grad if l.grad is not None else np.zeros_like(l.value) for l in leaves]
    for k, g in enumerate(d_params):
        if not np.all(np.isfinite(g)):
            kind = "weight" if k % 2 == 0 else "bias"
            raise GradientError(f"non-finite gradient in layer {k // 2} {kind}")
    if u.trainable:
        d_s = s_leaf.grad if s_leaf.grad is not None else np.zeros(4)
        if not np.all(np.isfinite(d_s)):
            raise GradientError("non-finite gradient in log-uncertainties")
    else:
        d_s = np.zeros(4)
    values = {k: (v.value.copy() if k == "w" else float(v.value)) for k, v in parts.items()}
    return Evaluation(float(total.value), np.array([float(c.value) for c in comps]),
                      values, d_params, d_s)
