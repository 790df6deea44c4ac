"""Primal-dual interior-point Newton solver for box-constrained equality NLPs.

Solves problems of the form

    min  f(u)   s.t.  g(u) = 0  (+ s when slack is enabled: g(u) + s = 0),
    lo <= u[idx] <= hi

by Newton's method on the KKT system with relaxed complementarity
``mu_i h_i = -eps``.  The relaxation parameter is driven geometrically from
``barrier_init`` down to ``barrier_min`` as Newton converges at each level.
Steps are damped by a fraction-to-boundary rule keeping ``mu > 0`` and
``h < 0`` strictly; there is no additional line search.

The same core backs the base optimal power flow, the contingency redispatch
solve and the defense step, which only differ in their problem objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import instrumentation
from .errors import ConvergenceError, SingularSystemError

__all__ = ["SolverOptions", "KktFactorization", "IpmResult", "solve_kkt_newton"]


@dataclass(frozen=True)
class SolverOptions:
    kkt_tol: float = 1e-6
    barrier_init: float = 1e-1
    barrier_min: float = 1e-13
    barrier_decay: float = 0.2
    max_newton: int = 120
    step_fraction: float = 0.995  # fraction-to-boundary tau
    pf_tol: float = 1e-8
    pf_max_iter: int = 50
    voltage_tie_weight: float = 1.0
    cost_scale: float = 1e-6
    theta_reg: float = 1e-8


class KktFactorization:
    """Sparse LU of a KKT Jacobian supporting direct and transpose solves.

    Instrumented: creating one records a factorization event, and each solve
    records a direct or transpose solve event.
    """

    def __init__(self, matrix_csc):
        instrumentation.record("kkt_factorizations")
        try:
            self._lu = spla.splu(matrix_csc)
        except RuntimeError as exc:
            raise SingularSystemError(f"KKT Jacobian factorization failed: {exc}") from exc
        self.shape = matrix_csc.shape

    def solve(self, rhs):
        instrumentation.record("kkt_solves")
        return self._lu.solve(rhs)

    def solve_transpose(self, rhs):
        instrumentation.record("kkt_transpose_solves")
        return self._lu.solve(rhs, trans="T")


@dataclass
class IpmResult:
    u: np.ndarray
    s: np.ndarray | None
    lam: np.ndarray
    mu: np.ndarray
    barrier: float
    iterations: int
    converged: bool
    residual: float
    residual_history: list[float] = field(default_factory=list)
    barrier_history: list[float] = field(default_factory=list)
    factorization: KktFactorization | None = None
    rhs_b: np.ndarray | None = None
    final_x: np.ndarray | None = None  # stacked KKT vector at exit


def box_values(u, idx, lo, hi):
    """Inequality values h = [lo - u[idx], u[idx] - hi] (feasible when < 0)."""
    vals = u[idx]
    return np.concatenate([lo - vals, vals - hi])


def push_interior(u, idx, lo, hi, rel=1e-3, floor=1e-9):
    """Clip box variables strictly inside their bounds."""
    width = hi - lo
    margin = np.maximum(rel * width, floor)
    margin = np.minimum(margin, 0.45 * width)
    u = u.copy()
    u[idx] = np.clip(u[idx], lo + margin, hi - margin)
    return u


def _kkt_residual_parts(problem, u, s, lam, mu, eps):
    f, grad, hess = problem.cost_grad_hess(u)
    g, jac = problem.equality(u)
    idx, lo, hi = problem.boxes
    h = box_values(u, idx, lo, hi)
    nbox = len(idx)

    jh_t_mu = np.zeros(problem.n_prim)
    np.add.at(jh_t_mu, idx, mu[nbox:] - mu[:nbox])

    r_stat = grad + jac.T @ lam + jh_t_mu
    offset = getattr(problem, "stationarity_offset", None)
    if offset is not None:
        r_stat = r_stat + offset
    r_g = g + s if problem.with_slack else g
    r_comp = mu * h + eps
    parts = [r_stat]
    if problem.with_slack:
        parts.append(s + lam)
    parts.extend([r_g, r_comp])
    return np.concatenate(parts), (f, grad, hess, g, jac, h)


def kkt_residual_norm(problem, u, s, lam, mu, eps) -> float:
    resid, _ = _kkt_residual_parts(problem, u, s, lam, mu, eps)
    return float(np.abs(resid).max()) if resid.size else 0.0


def _assemble_jacobian(problem, u, lam, mu, hess, jac, h):
    idx, lo, hi = problem.boxes
    n = problem.n_prim
    m = problem.n_eq
    nbox = len(idx)
    p = 2 * nbox

    hess_total = hess + problem.eq_lagr_hessian(u, lam)
    rows_h = np.concatenate([np.arange(nbox), np.arange(nbox) + nbox])
    cols_h = np.concatenate([idx, idx])
    vals_h = np.concatenate([-np.ones(nbox), np.ones(nbox)])
    jh = sp.coo_matrix((vals_h, (rows_h, cols_h)), shape=(p, n)).tocsr()

    eye_m = sp.identity(m, format="csr")
    comp_u = sp.diags(mu) @ jh
    comp_mu = sp.diags(h)

    if problem.with_slack:
        blocks = [
            [hess_total, None, jac.T, jh.T],
            [None, eye_m, eye_m, None],
            [jac, eye_m, None, None],
            [comp_u, None, None, comp_mu],
        ]
    else:
        blocks = [
            [hess_total, jac.T, jh.T],
            [jac, None, None],
            [comp_u, None, comp_mu],
        ]
    return sp.bmat(blocks, format="csc")


def solve_kkt_newton(problem, u0, opts: SolverOptions,
                     tol: float | None = None,
                     lam0=None, mu0=None, s0=None,
                     barrier_start: float | None = None,
                     trace=None) -> IpmResult:
    """Run the damped Newton iteration on the relaxed KKT system.

    ``barrier_start`` overrides the initial relaxation level; a warm start
    from a nearly-optimal point passes ``opts.barrier_min`` to skip the
    continuation entirely.  Raises :class:`ConvergenceError` when
    ``opts.max_newton`` iterations do not reach ``tol`` at the final barrier
    level, carrying the residual history.
    """
    tol = opts.kkt_tol if tol is None else tol
    idx, lo, hi = problem.boxes
    nbox = len(idx)
    n, m = problem.n_prim, problem.n_eq

    u = push_interior(np.asarray(u0, dtype=float), idx, lo, hi)
    s = np.zeros(m) if problem.with_slack else None
    lam = np.zeros(m) if lam0 is None else np.asarray(lam0, float).copy()
    mu = np.ones(2 * nbox) if mu0 is None else np.asarray(mu0, float).copy()
    if mu0 is not None:
        mu = np.maximum(mu, 1e-14)
    if s0 is not None and problem.with_slack:
        s = np.asarray(s0, float).copy()

    eps = opts.barrier_init if barrier_start is None else barrier_start
    history = []
    barrier_history = []
    factor = None
    rhs_b = None
    total_iters = 0
    tau = opts.step_fraction

    ncomp = 2 * nbox
    while True:
        level_tol = max(tol, 0.1 * eps) if eps > opts.barrier_min else tol
        # complementarity products must track the barrier level itself,
        # otherwise leftover multiplier pressure biases the primal point
        comp_tol = max(10.0 * eps, 1e-12)
        while True:
            resid, (f, grad, hess, g, jac, h) = _kkt_residual_parts(
                problem, u, s, lam, mu, eps
            )
            main = resid[:-ncomp] if ncomp else resid
            comp = resid[-ncomp:] if ncomp else np.zeros(0)
            rnorm = float(np.abs(resid).max()) if resid.size else 0.0
            rmain = float(np.abs(main).max()) if main.size else 0.0
            rcomp = float(np.abs(comp).max()) if comp.size else 0.0
            history.append(rnorm)
            barrier_history.append(eps)
            if trace is not None:
                trace.append((total_iters, rnorm, eps))
            if rmain <= level_tol and rcomp <= comp_tol:
                break
            if total_iters >= opts.max_newton:
                raise ConvergenceError(
                    f"KKT Newton did not converge in {opts.max_newton} iterations "
                    f"(residual {rnorm:.3e}, barrier {eps:.1e})",
                    residual_history=history,
                )
            kmat = _assemble_jacobian(problem, u, lam, mu, hess, jac, h)
            x_prev = _stack(problem, u, s, lam, mu)
            factor = KktFactorization(kmat)
            step = factor.solve(-resid)
            rhs_b = kmat @ x_prev - resid
            if not np.all(np.isfinite(step)):
                raise SingularSystemError(
                    "KKT Newton direction is non-finite (singular system)"
                )

            du = step[:n]
            dmu = step[-2 * nbox:] if nbox else np.zeros(0)
            alpha = 1.0
            if nbox:
                dh = np.concatenate([-du[idx], du[idx]])
                grow = dh > 0
                if np.any(grow):
                    alpha = min(alpha, float(np.min(tau * (-h[grow]) / dh[grow])))
                shrink = dmu < 0
                if np.any(shrink):
                    alpha = min(alpha, float(np.min(tau * mu[shrink] / (-dmu[shrink]))))
            u = u + alpha * du
            off = n
            if problem.with_slack:
                s = s + alpha * step[off:off + m]
                off += m
            lam = lam + alpha * step[off:off + m]
            off += m
            if nbox:
                mu = mu + alpha * step[off:]
            total_iters += 1

        if eps <= opts.barrier_min and rmain <= tol and rcomp <= comp_tol:
            break
        eps = max(eps * opts.barrier_decay, opts.barrier_min)

    if factor is None:
        # converged without taking a step; factor once at the solution so the
        # stored factorization contract still holds
        resid, (f, grad, hess, g, jac, h) = _kkt_residual_parts(
            problem, u, s, lam, mu, eps
        )
        kmat = _assemble_jacobian(problem, u, lam, mu, hess, jac, h)
        factor = KktFactorization(kmat)
        rhs_b = kmat @ _stack(problem, u, s, lam, mu) - resid

    return IpmResult(
        u=u, s=s, lam=lam, mu=mu, barrier=eps, iterations=total_iters,
        converged=True, residual=rnorm, residual_history=history,
        barrier_history=barrier_history, factorization=factor,
        rhs_b=rhs_b, final_x=_stack(problem, u, s, lam, mu),
    )


def _stack(problem, u, s, lam, mu):
    parts = [u]
    if problem.with_slack:
        parts.append(s)
    parts.extend([lam, mu])
    return np.concatenate(parts)
