"""Sequential quadratic programming with an active-set strategy.

Solves  min f(x)  s.t.  g(x) >= 0  (general inequalities, box bounds included
by the caller as rows of g).  Each iteration estimates the active set
(violated or within ``act_band``), solves one equality-constrained QP on it
via the KKT system with a damped-BFGS Hessian, and line-searches an L1 merit
function.  Constraint Jacobian rows are requested only for the working set,
which keeps adjoint-based constraint gradients affordable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import LineSearchFailed, MaxIterReached, QPSingular

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SQPOptions:
    epsx: float = 5e-4  # step-norm stopping tolerance
    opt_tol: float = 1e-6  # KKT stationarity tolerance
    feas_tol: float = 1e-6  # constraint violation tolerance
    max_iter: int = 200
    act_band: float = 1e-3  # activity band on scaled constraint values
    merit_sigma0: float = 1.0
    armijo_c: float = 1e-4
    max_backtracks: int = 30
    stall_iters: int = 5  # infeasibility declared after this many stalled steps
    d_max: float = 10.0  # cap on the step max-norm (scaled variables)
    gradient_check: bool = False  # debug FD check of the objective gradient at x0


@dataclass
class ConstraintEval:
    """Values of all inequality rows plus a lazy Jacobian-row provider.

    ``groups`` optionally labels rows that sample one constraint family over
    time (e.g. the same pressure bound at consecutive steps); the active-set
    selection then keeps only local minima per family, which avoids nearly
    duplicate working-set rows and ill-determined multipliers.
    """

    values: np.ndarray
    jacobian_rows: Callable[[np.ndarray], np.ndarray]  # indices -> (len(idx), n) array
    groups: np.ndarray | None = None


@dataclass
class NLPResult:
    x: np.ndarray
    objective: float
    max_violation: float
    kkt_residual: float
    iterations: int
    status: str  # 'converged' | 'max_iter' | 'infeasible'
    merit_history: list[float] = field(default_factory=list)
    multipliers: dict[int, float] = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _violation(g: np.ndarray) -> float:
    return float(np.maximum(0.0, -g).sum())


def _max_violation(g: np.ndarray) -> float:
    return float(max(0.0, np.max(-g, initial=0.0)))


def _select_working_set(ce: ConstraintEval, act_band: float) -> np.ndarray:
    cand = ce.values <= act_band
    if ce.groups is None:
        return np.flatnonzero(cand)
    keep = set(np.flatnonzero(ce.values < 0.0).tolist())  # every violated row
    for g in np.unique(ce.groups):
        idx = np.flatnonzero(ce.groups == g)
        vals = ce.values[idx]
        for j, i in enumerate(idx):
            if not cand[i]:
                continue
            left_ok = j == 0 or vals[j] <= vals[j - 1] + 1e-15
            right_ok = j == len(idx) - 1 or vals[j] <= vals[j + 1] + 1e-15
            if left_ok and right_ok:
                keep.add(int(i))
    return np.asarray(sorted(keep), dtype=int)


def sqp_solve(
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
    constraints: Callable[[np.ndarray], ConstraintEval] | None,
    x0: np.ndarray,
    opts: SQPOptions = SQPOptions(),
) -> NLPResult:
    """Active-set SQP with equality-constrained subproblems and an L1 merit.

    ``objective(x)`` returns (f, grad f); ``constraints(x)`` the inequality
    values g(x) >= 0 and a row provider for requested indices.
    """
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    f, grad = objective(x)
    if opts.gradient_check:
        _debug_gradient_check(objective, x, grad)
    ce = constraints(x) if constraints is not None else ConstraintEval(np.empty(0), lambda idx: np.empty((0, n)))
    B = np.eye(n)
    sigma = opts.merit_sigma0
    merit_history = [f + sigma * _violation(ce.values)]
    lam_by_row: dict[int, float] = {}
    tiny_alpha = 0
    progress: list[tuple[float, float]] = [(f, _violation(ce.values))]

    status = "max_iter"
    steps = 0
    kkt = np.inf
    for _ in range(opts.max_iter):
        active = _select_working_set(ce, opts.act_band)
        A = ce.jacobian_rows(active) if active.size else np.empty((0, n))
        gA = ce.values[active]

        d, lam = _solve_working_set_qp(B, grad, A, gA)
        # drop constraints pulling with the wrong multiplier sign and re-solve
        for _ in range(active.size):
            if lam.size == 0 or np.min(lam) >= -opts.opt_tol:
                break
            keep = lam > -opts.opt_tol
            active = active[keep]
            A = A[keep]
            gA = gA[keep]
            d, lam = _solve_working_set_qp(B, grad, A, gA)

        dn = float(np.linalg.norm(d, np.inf))
        if dn > opts.d_max:
            d = d * (opts.d_max / dn)
        lam_by_row = {int(r): float(v) for r, v in zip(active, lam)}
        kkt = _kkt_residual(grad, A, lam)
        viol = _violation(ce.values)
        if kkt <= opts.opt_tol and _max_violation(ce.values) <= opts.feas_tol:
            status = "converged"
            break
        if np.linalg.norm(d, np.inf) <= opts.epsx:
            if _max_violation(ce.values) <= opts.feas_tol:
                status = "converged"
            else:
                status = "infeasible"
            break

        if lam.size:
            # exactness needs sigma > |lambda|; bounded decay avoids a stale
            # penalty freezing the line search after a multiplier spike
            sigma = max(1.5 * float(np.max(np.abs(lam))) + 1e-6, 0.5 * sigma, opts.merit_sigma0)
        merit0 = f + sigma * viol
        # directional derivative surrogate of the L1 merit along d
        slope = float(grad @ d) - sigma * viol

        def probe(a):
            x_a = x + a * d
            f_a, grad_a = objective(x_a)
            ce_a = constraints(x_a) if constraints is not None else ce
            return x_a, f_a, grad_a, ce_a, f_a + sigma * _violation(ce_a.values)

        def armijo_ok(merit_a, a):
            return merit_a <= merit0 + opts.armijo_c * a * slope

        alpha = 1.0
        x_try, f_try, grad_try, ce_try, merit_try = probe(alpha)
        accepted = armijo_ok(merit_try, alpha)
        if not accepted and active.size:
            # second-order correction: re-linearize the working set at x + d to
            # cancel constraint curvature (counters Maratos rejection)
            g_try = ce_try.values[active] if ce_try.values.size > np.max(active, initial=0) else None
            if g_try is not None and np.all(np.isfinite(g_try)):
                dc, *_ = np.linalg.lstsq(A, -g_try, rcond=None)
                x_soc = x + d + dc
                f_soc, grad_soc = objective(x_soc)
                ce_soc = constraints(x_soc) if constraints is not None else ce
                merit_soc = f_soc + sigma * _violation(ce_soc.values)
                if armijo_ok(merit_soc, 1.0):
                    x_try, f_try, grad_try, ce_try, merit_try = x_soc, f_soc, grad_soc, ce_soc, merit_soc
                    accepted = True
        if not accepted:
            # quadratic interpolation of the merit along d; exact line search
            # for quadratic objectives (BFGS then terminates in n+1 steps)
            denom = merit_try - merit0 - slope
            if denom > 1e-16:
                a_q = float(np.clip(-slope / (2.0 * denom), 1e-4, 4.0))
                cand = probe(a_q)
                if armijo_ok(cand[4], a_q):
                    alpha, (x_try, f_try, grad_try, ce_try, merit_try) = a_q, cand
                    accepted = True
        if not accepted:
            for _ in range(opts.max_backtracks):
                alpha *= 0.5
                x_try, f_try, grad_try, ce_try, merit_try = probe(alpha)
                if armijo_ok(merit_try, alpha):
                    accepted = True
                    break
        if not accepted:
            if _max_violation(ce.values) > opts.feas_tol:
                status = "infeasible"
                break
            raise LineSearchFailed(f"merit line search failed after {steps} steps")

        if alpha < 0.05:
            tiny_alpha += 1
        else:
            tiny_alpha = 0
        # damped BFGS on the Lagrangian gradient difference
        s = alpha * d
        grad_L_old = grad - (A.T @ lam if lam.size else 0.0)
        if lam.size:
            A_new = ce_try.jacobian_rows(active)
            grad_L_new = grad_try - A_new.T @ lam
        else:
            grad_L_new = grad_try
        y = grad_L_new - grad_L_old
        if tiny_alpha >= 3:
            # the quadratic model has gone stale; restart from scaled identity
            ss, sy = float(s @ s), float(s @ y)
            B = (max(sy / ss, 1e-6) if ss > 0 and sy > 0 else 1.0) * np.eye(n)
            tiny_alpha = 0
        else:
            B = _damped_bfgs_update(B, s, y)

        x, f, grad, ce = x_try, f_try, grad_try, ce_try
        steps += 1
        merit_history.append(f + sigma * _violation(ce.values))
        log.debug(
            "step %d: f=%.6e viol=%.3e kkt=%.3e |d|=%.3e alpha=%.3f active=%d sigma=%.2f",
            steps, f, _violation(ce.values), kkt, dn, alpha, active.size, sigma,
        )

        new_viol = _violation(ce.values)
        progress.append((f, new_viol))
        if len(progress) > opts.stall_iters and new_viol > opts.feas_tol:
            f_ref, v_ref = progress[-opts.stall_iters - 1]
            viol_stalled = new_viol > 0.99 * v_ref
            f_stalled = f > f_ref - 1e-6 * max(1.0, abs(f_ref))
            if viol_stalled and f_stalled:
                status = "infeasible"
                break

    return NLPResult(
        x=x,
        objective=f,
        max_violation=_max_violation(ce.values),
        kkt_residual=kkt,
        iterations=steps,
        status=status,
        merit_history=merit_history,
        multipliers=lam_by_row,
    )


def _solve_working_set_qp(B, grad, A, gA):
    """min 0.5 d'Bd + grad'd  s.t.  A d = -gA  via the KKT system."""
    m = A.shape[0]
    n = grad.size
    if m == 0:
        try:
            return np.linalg.solve(B, -grad), np.empty(0)
        except np.linalg.LinAlgError as exc:
            raise QPSingular(str(exc)) from exc
    K = np.zeros((n + m, n + m))
    K[:n, :n] = B
    K[:n, n:] = -A.T
    K[n:, :n] = A
    K[n:, n:] = -1e-10 * np.eye(m)  # quasi-definite stabilization of the dual block
    rhs = np.concatenate([-grad, -gA])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        # inconsistent/rank-deficient working set: least-squares fallback
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    if not np.all(np.isfinite(sol)):
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    return sol[:n], sol[n:]


def _kkt_residual(grad, A, lam) -> float:
    r = grad - (A.T @ lam if lam.size else 0.0)
    return float(np.linalg.norm(r, np.inf))


def _damped_bfgs_update(B, s, y, damping=0.2):
    sBs = float(s @ B @ s)
    if sBs <= 0.0 or float(s @ s) == 0.0:
        return B
    sy = float(s @ y)
    if sy < damping * sBs:
        theta = (1.0 - damping) * sBs / (sBs - sy)
        y = theta * y + (1.0 - theta) * (B @ s)
        sy = float(s @ y)
    Bs = B @ s
    return B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy


def _debug_gradient_check(objective, x, grad, h=1e-6, tol=1e-4):
    fd = np.zeros_like(grad)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h * max(1.0, abs(x[j]))
        fd[j] = (objective(x + e)[0] - objective(x - e)[0]) / (2 * e[j])
    denom = np.maximum(np.abs(fd), 1e-8)
    worst = float(np.max(np.abs(fd - grad) / denom))
    if worst > tol:
        raise ValueError(f"objective gradient fails the FD check: rel err {worst:.2e}")
