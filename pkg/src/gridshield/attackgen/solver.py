"""Augmented-Lagrangian solver for attack problems.

Range constraints ``lo <= c(x) <= hi`` are handled with the shifted-penalty
(PHR) form; each subproblem is a box-constrained minimization done with
scipy's L-BFGS-B.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .formulation import AttackNLP, Inapplicable
from .problem import AttackProblem
from .verify import FeasibilityReport, verify_feasibility

STATUSES = ("optimal", "max_iter", "degenerate", "infeasible", "inapplicable")


@dataclass(frozen=True)
class SolverConfig:
    max_outer: int = 50
    ctol: float = 5e-7
    stall_rtol: float = 1e-8
    stall_window: int = 5
    mu0: float = 10.0
    mu_growth: float = 10.0
    mu_max: float = 1e9
    inner_maxiter: int = 400  # per subproblem; max_evals caps the whole solve
    inner_gtol0: float = 1e-3
    inner_gtol: float = 1e-9
    maxcor: int = 30
    max_evals: int = 8000
    scale: bool = True
    n_starts: int = 1
    perturb_v: float = 5e-3
    perturb_theta: float = 2e-2

    def __post_init__(self):
        if self.max_outer < 1 or self.n_starts < 1 or self.stall_window < 1:
            raise ValueError("max_outer, n_starts and stall_window must be >= 1")
        if self.ctol <= 0 or self.mu0 <= 0 or self.mu_growth <= 1:
            raise ValueError("ctol, mu0 must be > 0 and mu_growth > 1")


@dataclass
class AttackResult:
    P: np.ndarray
    Q: np.ndarray
    V: np.ndarray
    theta: np.ndarray
    family: str
    zone_id: str
    objective: float
    status: str
    report: FeasibilityReport | None = None
    outer_iterations: int = 0
    history: list = field(default_factory=list)
    message: str = ""
    evaluations: int = 0

    @property
    def emitted(self) -> bool:
        return self.status in ("optimal", "max_iter") and self.report is not None \
            and self.report.passed


def _al_pass(nlp: AttackNLP, x, cfg: SolverConfig, best):
    """One augmented-Lagrangian run from ``x``; updates ``best`` in place."""
    y = np.zeros(nlp.m)
    mu = cfg.mu0
    prev_viol = np.inf
    feas_f = []
    # diagonal preconditioning: unit-norm constraint-Jacobian columns
    _, jtv = nlp.constraints(x)
    J = np.array([jtv(e) for e in np.eye(nlp.m)])
    D = 1.0 / np.maximum(np.linalg.norm(J, axis=0), 1e-3) if cfg.scale else np.ones(nlp.nx)
    bounds = list(zip(nlp.lb / D, nlp.ub / D))
    # scale the objective so its gradient is O(1) at the start point
    fscale = max(1.0, float(np.max(np.abs(nlp.objective(x)[1]))))
    gtol = cfg.inner_gtol0
    status = "max_iter"
    it = 0
    for it in range(1, cfg.max_outer + 1):
        def fun(z, y=y, mu=mu):
            xz = D * z
            f, g = nlp.objective(xz)
            c, jtv = nlp.constraints(xz)
            s = c + y / mu
            d = s - np.clip(s, nlp.lo, nlp.hi)
            return -f / fscale + 0.5 * mu * float(d @ d), D * (jtv(mu * d) - g / fscale)

        res = minimize(fun, x / D, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": cfg.inner_maxiter, "ftol": 1e-15, "gtol": gtol,
                                "maxcor": cfg.maxcor,
                                "maxfun": max(cfg.max_evals - best["nfev"], 1)})
        best["nfev"] += res.nfev
        x_new = np.clip(D * res.x, nlp.lb, nlp.ub)
        c, _ = nlp.constraints(x_new)
        s = c + y / mu
        y = mu * (s - np.clip(s, nlp.lo, nlp.hi))
        viol = nlp.violation(c)
        moved = float(np.max(np.abs(x_new - x)))
        x = x_new
        if viol <= cfg.ctol:
            f = nlp.objective(x, smooth=False)[0]
            feas_f.append(f)
            if f > best["f"]:
                best.update(f=f, x=x.copy())
        else:
            feas_f.clear()
        best["history"].append(best["f"])
        if viol <= cfg.ctol:
            w = cfg.stall_window
            if len(feas_f) > w and abs(feas_f[-1] - feas_f[-1 - w]) <= \
                    cfg.stall_rtol * max(abs(feas_f[-1]), 1e-300):
                status = "optimal"
                break
            if moved <= 1e-13 and len(feas_f) > 1:
                # a fixed point repeats forever, so the stall test is already decided
                status = "optimal"
                break
        if best["nfev"] >= cfg.max_evals:
            break
        gtol = max(gtol * 0.1, cfg.inner_gtol)
        if viol > 0.25 * prev_viol:
            mu = min(mu * cfg.mu_growth, cfg.mu_max)
        prev_viol = viol
    return status, it


def solve_attack(prob: AttackProblem, cfg: SolverConfig | None = None) -> AttackResult:
    """Maximize the family objective over the shared feasible set.

    Returns the best feasible iterate with an independent feasibility
    report. Status ``degenerate`` means no feasible point improved on the
    baseline (baseline returned); ``infeasible`` means no iterate met the
    constraint tolerance; ``inapplicable`` means the family has nothing to
    act on in this zone.
    """
    cfg = cfg or SolverConfig()
    base = prob.baseline
    zid = prob.zone.zone_id
    fam = prob.family.name
    try:
        nlp = AttackNLP(prob)
    except Inapplicable as exc:
        return AttackResult(base.P.copy(), base.Q.copy(), base.V.copy(), base.theta.copy(),
                            fam, zid, 0.0, "inapplicable", message=str(exc))
    x0 = np.clip(nlp.baseline_x(), nlp.lb, nlp.ub)
    c0, _ = nlp.constraints(x0)
    f_base = nlp.objective(x0, smooth=False)[0]
    best = {"f": -np.inf, "x": None, "history": [], "nfev": 0}
    if nlp.violation(c0) <= cfg.ctol:
        best.update(f=f_base, x=x0.copy())

    rng = np.random.default_rng([int(v) for v in np.atleast_1d(prob.seed)] + [0x5EED])
    statuses, outer = [], 0
    for _ in range(cfg.n_starts):
        x = x0.copy()
        x[nlp.iV] += rng.normal(0.0, cfg.perturb_v, len(nlp.iV))
        x[nlp.ith] += rng.normal(0.0, cfg.perturb_theta, len(nlp.ith))
        x = np.clip(x, nlp.lb, nlp.ub)
        st, it = _al_pass(nlp, x, cfg, best)
        statuses.append(st)
        outer += it

    if best["x"] is None:
        return AttackResult(base.P.copy(), base.Q.copy(), base.V.copy(), base.theta.copy(),
                            fam, zid, 0.0, "infeasible", outer_iterations=outer,
                            history=best["history"], message="no iterate met the tolerance",
                            evaluations=best["nfev"])
    if best["f"] <= f_base + 1e-14 * max(1.0, abs(f_base)):
        status = "degenerate"
    else:
        status = "optimal" if "optimal" in statuses else "max_iter"
    x = best["x"] if status != "degenerate" else x0
    P, Q, V, th = nlp.decode(x)
    report = verify_feasibility(P, Q, V, th, base, prob.zone, prob.model, prob.Y,
                                prob.feasible, prob.family)
    return AttackResult(P, Q, V, th, fam, zid, float(nlp.objective(x, smooth=False)[0]),
                        status, report, outer, best["history"], evaluations=best["nfev"])
