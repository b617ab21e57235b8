"""Compile an :class:`AttackProblem` into a box-bounded NLP with range constraints.

Decision vector ``x`` holds the zone's free active/reactive injections
(or, for load redistribution, the generator/load deltas), then ``V_Z`` and
``theta_Z``. Zero-injection buses are eliminated and exterior buses stay at
the baseline. Every constraint is a range ``lo <= c(x) <= hi`` and comes
with an exact adjoint product ``J(x)^T w``.
"""

from __future__ import annotations

import numpy as np

from ..case_model import GridGraph
from .problem import (AttackProblem, boundary_transfer, clean_residuals,
                      corruption_tolerances, flow_terms, lra_cap, lra_costs,
                      select_target_lines, simple_envelope, zone_gen_load_buses)

SMOOTH_EPS = 1e-12


class Inapplicable(ValueError):
    """The family has nothing to act on in this zone."""


class AttackNLP:
    def __init__(self, prob: AttackProblem):
        self.prob = prob
        model, Y, base, zone = prob.model, prob.Y, prob.baseline, prob.zone
        fam, fs = prob.family, prob.feasible
        self.family = fam.name
        n = model.n_bus
        self.n_bus = n
        Z = np.array(zone.buses, dtype=int)
        self.Z = Z
        nz = len(Z)
        zi = set(zone.zero_injection)
        P0, Q0 = np.asarray(base.P, float), np.asarray(base.Q, float)
        self.P0, self.Q0 = P0, Q0
        self.V0, self.th0 = np.asarray(base.V, float), np.asarray(base.theta, float)

        # ---- variables: injections first, then V_Z, theta_Z
        lb, ub, labels = [], [], []
        Dp_cols, Dq_cols = [], []   # (zone position, var index, coefficient)
        p_off = np.where(np.isin(Z, list(zi)), 0.0, P0[Z])
        q_off = np.where(np.isin(Z, list(zi)), 0.0, Q0[Z])

        def add_var(lo, hi, label):
            lb.append(lo)
            ub.append(hi)
            labels.append(label)
            return len(lb) - 1

        self.lra = None
        if fam.name == "lra":
            gens, loads = zone_gen_load_buses(model, zone, P0)
            if not gens and not loads:
                raise Inapplicable("zone has no generator or load buses")
            pos = {int(b): k for k, b in enumerate(Z)}
            cp, cm = lra_costs(model, fam, gens)
            ig_plus, ig_minus, il = [], [], []
            for b in gens:
                cap = lra_cap(P0[b], fam.gen_cap, fam.gen_fallback)
                ip = add_var(0.0, cap, f"dPg+[{b}]")
                im = add_var(0.0, cap, f"dPg-[{b}]")
                Dp_cols += [(pos[b], ip, 1.0), (pos[b], im, -1.0)]
                ig_plus.append(ip)
                ig_minus.append(im)
            for b in loads:
                cap = lra_cap(P0[b], fam.load_cap, fam.load_fallback)
                k = add_var(-cap, cap, f"dPl[{b}]")
                Dp_cols.append((pos[b], k, 1.0))
                il.append(k)
            self.lra = (np.array(ig_plus, int), np.array(ig_minus, int),
                        np.array(il, int), cp, cm, fam.lam)
            for k, b in enumerate(Z):
                if b not in zi:
                    Dq_cols.append((k, add_var(-np.inf, np.inf, f"Q[{b}]"), 1.0))
                    q_off[k] = 0.0
        else:
            env = fam.name == "simple"
            for k, b in enumerate(Z):
                if b in zi:
                    continue
                if env:
                    ep = simple_envelope(P0[b], fam.kappa_p, fam.delta_p)
                    lo, hi = P0[b] - ep, P0[b] + ep
                else:
                    lo, hi = -np.inf, np.inf
                Dp_cols.append((k, add_var(lo, hi, f"P[{b}]"), 1.0))
                p_off[k] = 0.0
            for k, b in enumerate(Z):
                if b in zi:
                    continue
                if env:
                    eq = simple_envelope(Q0[b], fam.kappa_q, fam.delta_q)
                    lo, hi = Q0[b] - eq, Q0[b] + eq
                else:
                    lo, hi = -np.inf, np.inf
                Dq_cols.append((k, add_var(lo, hi, f"Q[{b}]"), 1.0))
                q_off[k] = 0.0
        self.iV = np.array([add_var(fs.v_min, fs.v_max, f"V[{b}]") for b in Z], int)
        self.ith = np.array([add_var(fs.theta_min, fs.theta_max, f"th[{b}]") for b in Z], int)
        self.nx = len(lb)
        self.lb, self.ub, self.labels = np.array(lb), np.array(ub), labels
        self.Dp = np.zeros((nz, self.nx))
        self.Dq = np.zeros((nz, self.nx))
        for k, j, c in Dp_cols:
            self.Dp[k, j] = c
        for k, j, c in Dq_cols:
            self.Dq[k, j] = c
        self.p_off, self.q_off = p_off, q_off

        # ---- residual rows: zone plus exterior neighbours, all in a local
        # index space L (every bus those rows touch)
        graph = GridGraph.from_model(model)
        S = set(zone.buses)
        for b in zone.buses:
            S |= graph.neighbors(b)
        self.S = np.array(sorted(S), dtype=int)
        L = set(S)
        for b in S:
            L |= graph.neighbors(b)
        self.L = np.array(sorted(L), dtype=int)
        loc = np.full(n, -1)
        loc[self.L] = np.arange(len(self.L))
        self.zL, self.sL = loc[Z], loc[self.S]
        Yd = Y.Y.tocsr()[self.S][:, self.L].toarray()
        self.YS, self.YS_T = Yd, Yd.T.copy()
        s_pos = np.full(n, -1)
        s_pos[self.S] = np.arange(len(self.S))
        self.zone_in_S = s_pos[Z]
        nS = len(self.S)
        self.PS0, self.QS0 = P0[self.S].copy(), Q0[self.S].copy()
        self.V0L, self.th0L = self.V0[self.L].copy(), self.th0[self.L].copy()
        tau_lo_p = np.full(nS, -fs.tau_p)
        tau_hi_p = np.full(nS, fs.tau_p)
        tau_lo_q = np.full(nS, -fs.tau_q)
        tau_hi_q = np.full(nS, fs.tau_q)
        if fam.name == "corruption":
            r0p, r0q = clean_residuals(base, Y)
            rows = self.zone_in_S
            tp, tq = corruption_tolerances(r0p[Z], fam), corruption_tolerances(r0q[Z], fam)
            tau_lo_p[rows] = np.maximum(tau_lo_p[rows], r0p[Z] - tp)
            tau_hi_p[rows] = np.minimum(tau_hi_p[rows], r0p[Z] + tp)
            tau_lo_q[rows] = np.maximum(tau_lo_q[rows], r0q[Z] - tq)
            tau_hi_q[rows] = np.minimum(tau_hi_q[rows], r0q[Z] + tq)

        # ---- boundary transfer rows: one complex row per zone-exterior branch end
        self.flow = flow_terms(model, zone)
        self.n_bnd = len(zone.boundary)
        owner, bi, bj, ga, gc, bc = self.flow
        nt = len(owner)
        self.Yb = np.zeros((nt, len(self.L)), complex)
        self.Yb[np.arange(nt), loc[bi]] += ga
        self.Yb[np.arange(nt), loc[bj]] += gc + 1j * bc
        self.Yb_T = self.Yb.T.copy()
        self.biL = loc[bi]
        self.own = np.zeros((self.n_bnd, nt))
        self.own[owner, np.arange(nt)] = 1.0
        self.scat_b = np.zeros((len(self.L), nt))
        self.scat_b[loc[bi], np.arange(nt)] = 1.0
        self.F0 = boundary_transfer(self.V0, self.th0, self.flow, self.n_bnd)
        bnd_tol = np.array([fs.boundary_tol(f) for f in self.F0])

        self.eps_cons = fs.conservation_tol(float(P0[Z].sum()))
        self.sumP0, self.sumQ0 = float(P0[Z].sum()), float(Q0[Z].sum())

        lo = [tau_lo_p, tau_lo_q, self.F0 - bnd_tol, [-self.eps_cons], [-self.eps_cons]]
        hi = [tau_hi_p, tau_hi_q, self.F0 + bnd_tol, [self.eps_cons], [self.eps_cons]]
        names = (["residual_p"] * nS + ["residual_q"] * nS + ["boundary_transfer"] * self.n_bnd
                 + ["conservation_p", "conservation_q"])
        self.has_balance = self.lra is not None and len(self.lra[2]) > 0
        if self.has_balance:
            lo.append([0.0])
            hi.append([0.0])
            names.append("load_balance")
        self.lo, self.hi = np.concatenate(lo), np.concatenate(hi)
        self.groups = np.array(names)
        self.m = len(self.lo)

        self.targets = []
        if fam.name == "line":
            self.targets = select_target_lines(Y, zone, fam.max_lines)
            t = np.array(self.targets, dtype=float).reshape(-1, 3)
            self.t_i, self.t_j = t[:, 0].astype(int), t[:, 1].astype(int)
            self.t_b2 = t[:, 2] ** 2
            loc = np.full(n, -1)
            loc[self.L] = np.arange(len(self.L))
            self.t_iL, self.t_jL = loc[self.t_i], loc[self.t_j]

    # ------------------------------------------------------------ mapping
    def baseline_x(self) -> np.ndarray:
        x = np.zeros(self.nx)
        free_p = self.Dp.any(axis=0)
        if self.lra is None:
            rows = np.argmax(self.Dp[:, free_p], axis=0)
            x[free_p] = self.P0[self.Z[rows]]
        free_q = self.Dq.any(axis=0)
        rows = np.argmax(self.Dq[:, free_q], axis=0)
        x[free_q] = self.Q0[self.Z[rows]]
        x[self.iV] = self.V0[self.Z]
        x[self.ith] = self.th0[self.Z]
        return x

    def decode(self, x):
        """Full-length ``(P, Q, V, theta)``; exterior entries are baseline copies."""
        P, Q = self.P0.copy(), self.Q0.copy()
        V, th = self.V0.copy(), self.th0.copy()
        P[self.Z] = self.p_off + self.Dp @ x
        Q[self.Z] = self.q_off + self.Dq @ x
        V[self.Z] = x[self.iV]
        th[self.Z] = x[self.ith]
        return P, Q, V, th

    # -------------------------------------------------------- constraints
    def _local_state(self, x):
        V, th = self.V0L.copy(), self.th0L.copy()
        V[self.zL] = x[self.iV]
        th[self.zL] = x[self.ith]
        return V, th, V * np.exp(1j * th)

    def constraints(self, x):
        """``c(x)`` and a closure computing ``J(x)^T w``.

        With ``U = V e^{j theta}`` each row is ``U_k conj((A U)_k)`` for a dense
        local admittance block ``A``; the adjoint of ``Re(conj(w) U_k conj(I_k))``
        with respect to ``U`` is ``G = conj(w I)`` at ``k`` plus ``A^T (w conj(U_k))``,
        and then ``dV = Re(G U) / V``, ``dtheta = -Im(U G)``.
        """
        V, th, U = self._local_state(x)
        nS = len(self.S)
        Pz = self.p_off + self.Dp @ x
        Qz = self.q_off + self.Dq @ x
        I = self.YS @ U
        US = U[self.sL]
        S_inj = US * np.conj(I)
        PS, QS = self.PS0.copy(), self.QS0.copy()
        PS[self.zone_in_S] = Pz
        QS[self.zone_in_S] = Qz
        Ib = self.Yb @ U
        Ub = U[self.biL]
        F = self.own @ (Ub * np.conj(Ib)).real
        parts = [PS - S_inj.real, QS - S_inj.imag, F,
                 [Pz.sum() - self.sumP0], [Qz.sum() - self.sumQ0]]
        if self.has_balance:
            parts.append([x[self.lra[2]].sum()])
        c = np.concatenate(parts)

        def jtv(w):
            k = 2 * nS + self.n_bnd
            wp, wq, wb = w[:nS], w[nS:2 * nS], w[2 * nS:k]
            zr = self.zone_in_S
            gPz = wp[zr] + w[k]
            gQz = wq[zr] + w[k + 1]
            om = -(wp + 1j * wq)
            G = np.zeros(len(self.L), complex)
            G[self.sL] = np.conj(om * I)
            G += self.YS_T @ (om * np.conj(US))
            if len(wb):
                u = wb @ self.own
                G += self.scat_b @ np.conj(u * Ib) + self.Yb_T @ (u * np.conj(Ub))
            GU = (G * U)[self.zL]
            gx = self.Dp.T @ gPz + self.Dq.T @ gQz
            gx[self.iV] += GU.real / V[self.zL]
            gx[self.ith] -= GU.imag
            if self.has_balance:
                gx[self.lra[2]] += w[k + 2]
            return gx

        return c, jtv

    # ---------------------------------------------------------- objective
    def objective(self, x, smooth: bool = True):
        """Family objective (to maximize) and its gradient."""
        g = np.zeros(self.nx)
        if self.family in ("simple", "corruption"):
            dv = x[self.iV] - self.V0[self.Z]
            dt = x[self.ith] - self.th0[self.Z]
            g[self.iV], g[self.ith] = 2 * dv, 2 * dt
            return float(dv @ dv + dt @ dt), g
        if self.family == "line":
            V, th, _ = self._local_state(x)
            ti, tj = self.t_iL, self.t_jL
            dt = th[ti] - th[tj]
            dv = V[ti] - V[tj]
            f = float(np.sum(self.t_b2 * (dt ** 2 + dv ** 2)))
            nl = len(self.L)
            gt = 2 * self.t_b2 * dt
            gv = 2 * self.t_b2 * dv
            g_th = np.bincount(ti, gt, minlength=nl) - np.bincount(tj, gt, minlength=nl)
            g_V = np.bincount(ti, gv, minlength=nl) - np.bincount(tj, gv, minlength=nl)
            g[self.iV] = g_V[self.zL]
            g[self.ith] = g_th[self.zL]
            return f, g
        ip, im, il, cp, cm, lam = self.lra
        xl = x[il]
        if smooth:
            a = np.sqrt(xl ** 2 + SMOOTH_EPS)
            g[il] = lam * xl / a
        else:
            a = np.abs(xl)
        g[ip], g[im] = cp, -cm
        return float(cp @ x[ip] - cm @ x[im] + lam * a.sum()), g

    def violation(self, c) -> float:
        return float(np.max(np.maximum(self.lo - c, c - self.hi), initial=0.0))
