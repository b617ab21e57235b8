"""A small reverse-mode tape over numpy arrays.

Only the operators the estimator objective needs are provided. Most are
elementwise; ``affine``, ``swish``, ``std`` and :class:`InjectionOp` are
fused nodes with hand-written adjoints.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value) if seed is None else np.asarray(seed, float)
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for p, g in zip(node.parents, grads):
                if g is None or not p.requires_grad:
                    continue
                g = _unbroadcast(g, p.value.shape)
                p.grad = g if p.grad is None else p.grad + g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(lift(other)))

    def __rsub__(self, other):
        return add(lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def leaf(value) -> Tensor:
    return Tensor(np.array(value, dtype=float), requires_grad=True)


def lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ------------------------------------------------------------ elementwise

def add(a, b):
    a, b = lift(a), lift(b)
    return Tensor(a.value + b.value, (a, b), lambda g: (g, g))


def neg(a):
    return Tensor(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = lift(a), lift(b)
    return Tensor(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def div(a, b):
    a, b = lift(a), lift(b)
    out = a.value / b.value
    return Tensor(out, (a, b), lambda g: (g / b.value, -g * out / b.value))


def power(a, k: float):
    a = lift(a)
    return Tensor(a.value ** k, (a,), lambda g: (g * k * a.value ** (k - 1),))


def square(a):
    a = lift(a)
    return Tensor(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def exp(a):
    a = lift(a)
    out = np.exp(a.value)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a):
    a = lift(a)
    return Tensor(np.log(a.value), (a,), lambda g: (g / a.value,))


def sin(a):
    a = lift(a)
    return Tensor(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),))


def cos(a):
    a = lift(a)
    return Tensor(np.cos(a.value), (a,), lambda g: (-g * np.sin(a.value),))


def clip(a, lo: float, hi: float):
    """Clip with zero subgradient outside ``[lo, hi]``."""
    a = lift(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return Tensor(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def relu(a):
    """``max(0, a)``; subgradient 0 at and below zero."""
    a = lift(a)
    pos = a.value > 0
    return Tensor(np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,))


# ------------------------------------------------------------- reductions

def sum(a, axis=None):  # noqa: A001
    a = lift(a)
    shape = a.value.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(np.sum(a.value, axis=axis), (a,), bw)


def mean(a, axis=None):
    a = lift(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return sum(a, axis) * (1.0 / n)


def std(a):
    """Population standard deviation over all entries (zero gradient at 0)."""
    a = lift(a)
    mu = a.value.mean()
    dev = a.value - mu
    sigma = float(np.sqrt(np.mean(dev * dev)))

    def bw(g):
        if sigma == 0.0:
            return (np.zeros_like(a.value),)
        return (g * dev / (a.value.size * sigma),)

    return Tensor(sigma, (a,), bw)


# ------------------------------------------------------------------ shape

def getitem(a, key):
    a = lift(a)

    def bw(g):
        out = np.zeros_like(a.value)
        out[key] = g
        return (out,)

    return Tensor(a.value[key], (a,), bw)


def concat(parts, axis=-1):
    parts = [lift(p) for p in parts]
    sizes = np.cumsum([p.value.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), bw)


def stack(scalars):
    """Stack 0-d nodes into a 1-d node."""
    parts = [lift(s) for s in scalars]
    return Tensor(np.array([p.value for p in parts]), tuple(parts),
                  lambda g: tuple(g[k] for k in range(len(parts))))


# ------------------------------------------------------------ fused layers

def matmul(a, b):
    a, b = lift(a), lift(b)
    return Tensor(a.value @ b.value, (a, b),
                  lambda g: (g @ b.value.T, a.value.T @ g))


def affine(x, W, b):
    """``x @ W + b`` for a batch ``x`` of shape ``(k, d_in)``."""
    x, W, b = lift(x), lift(W), lift(b)

    def bw(g):
        return (g @ W.value.T if x.requires_grad else None,
                x.value.T @ g, g.sum(axis=0))

    return Tensor(x.value @ W.value + b.value, (x, W, b), bw)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def swish(a):
    """``a * sigmoid(a)``."""
    a = lift(a)
    s = _sigmoid(a.value)
    out = a.value * s
    return Tensor(out, (a,), lambda g: (g * (s + out * (1.0 - s)),))


class InjectionOp:
    """Sparse AC injection map ``(V, theta) -> (P_inj, Q_inj)`` on the tape.

    Built once per admittance; evaluates the bilinear trig form over the
    structural nonzeros ``(i, j)`` of ``Y`` for batches ``(k, n_bus)``.
    """

    def __init__(self, Y):
        self.n = Y.n_bus
        self.rows = np.asarray(Y.rows)
        self.cols = np.asarray(Y.cols)
        self.g = np.asarray(Y.g)
        self.b = np.asarray(Y.b)
        nnz = len(self.rows)
        ones = np.ones(nnz)
        # scatter matrices: (n x nnz) so that segment sums are  M @ x.T
        self.R = sp.csr_matrix((ones, (self.rows, np.arange(nnz))), shape=(self.n, nnz))
        self.C = sp.csr_matrix((ones, (self.cols, np.arange(nnz))), shape=(self.n, nnz))

    def _seg(self, M, x):
        return np.asarray(M @ x.T).T

    def evaluate(self, V, theta):
        V = np.atleast_2d(V)
        theta = np.atleast_2d(theta)
        Vi, Vj = V[:, self.rows], V[:, self.cols]
        dth = theta[:, self.rows] - theta[:, self.cols]
        c, s = np.cos(dth), np.sin(dth)
        hp = self.g * c + self.b * s
        hq = self.g * s - self.b * c
        vv = Vi * Vj
        return (Vi, Vj, hp, hq, vv * hp, vv * hq)

    def __call__(self, V, theta):
        V, theta = lift(V), lift(theta)
        Vi, Vj, hp, hq, tp, tq = self.evaluate(V.value, theta.value)
        P = self._seg(self.R, tp)
        Q = self._seg(self.R, tq)

        def bw_p(g):
            return self._backward(g, None, Vi, Vj, hp, hq, tp, tq)

        def bw_q(g):
            return self._backward(None, g, Vi, Vj, hp, hq, tp, tq)

        return (Tensor(P, (V, theta), bw_p), Tensor(Q, (V, theta), bw_q))

    def _backward(self, gP, gQ, Vi, Vj, hp, hq, tp, tq):
        k = Vi.shape[0]
        uP = gP[:, self.rows] if gP is not None else np.zeros((k, len(self.rows)))
        uQ = gQ[:, self.rows] if gQ is not None else np.zeros((k, len(self.rows)))
        # d(term)/d(theta_i) = -tq (P), +tp (Q); opposite for theta_j
        a = -uP * tq + uQ * tp
        g_theta = self._seg(self.R, a) - self._seg(self.C, a)
        h = uP * hp + uQ * hq
        g_V = self._seg(self.R, h * Vj) + self._seg(self.C, h * Vi)
        return g_V, g_theta
