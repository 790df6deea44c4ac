"""Outer minimization step: ordered nonlinear Gauss-Seidel on the coupled KKT.

The combined problem (base dispatch plus one frozen worst-case contingency)
decouples into a base-side group and a contingency-side group that interact
only through the ramp bands, the voltage ties and the redispatch-cost
centers.  The contingency half is already satisfied by the attack's converged
solve and is reused, never recomputed; one defense step solves the base-side
group with the frozen coupling terms added to its stationarity rows and keeps
the dispatch from that solve.  Base power-flow feasibility is preserved by
construction because the base-side group contains the full flow equations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, SingularSystemError
from .grid_model import AttackVector, PowerSystem
from .implicit_grad import dispatch_gradient
from .ipm import SolverOptions, kkt_residual_norm, solve_kkt_newton
from .powerflow import (
    BaseOpfProblem,
    Dispatch,
    NetworkState,
    assemble_primal,
    solve_power_flow,
)
from .third_stage import ThirdStageSolution, kkt_residual

__all__ = [
    "DefenseConfig",
    "DefenseStepResult",
    "coupling_vector",
    "defense_step",
    "outer_gradient_step",
    "combined_kkt_residual",
]


@dataclass(frozen=True)
class DefenseConfig:
    base_tol: float = 1e-6
    damping: float = 1.0
    retries: int = 3
    warm_newton_budget: int = 60
    # proximal weight anchoring the single Gauss-Seidel pass at the current
    # dispatch; sized against the slack-penalty curvature of the inner loss
    prox_weight: float = 0.5


@dataclass
class DefenseStepResult:
    x: Dispatch
    state: NetworkState
    lam: np.ndarray | None
    mu: np.ndarray | None
    kkt_residual: float
    pf_residual: float
    coupling: np.ndarray
    coupling_norm: float
    eta: float
    stalled: bool
    stall_reason: str = ""


def coupling_vector(sys: PowerSystem, x: Dispatch, sol: ThirdStageSolution,
                    opts: SolverOptions) -> np.ndarray:
    """Contingency-side terms entering the base-group stationarity rows.

    Derivative of the frozen contingency Lagrangian w.r.t. the base-side
    variables: redispatch-cost centers, ramp-band and voltage-tie
    multipliers, and the slack-power center which is itself a base-side
    state variable.
    """
    problem = sol.problem
    vmap = problem.vmap
    ng = sys.n_gen
    ns = sys.nonslack_gens
    sigma = opts.cost_scale
    coup = problem.coupling
    nbox = problem.n_box
    mu_lo = sol.mu[:nbox]
    mu_hi = sol.mu[nbox:]
    zp = problem.box_slices["zp"]

    c = np.zeros(vmap.n_prim)
    pdev = sol.z.p - x.p
    c[: ng - 1] = -sigma * 2.0 * sys.gen_c2[ns] * pdev
    c[: ng - 1] += np.where(coup.p_lo_is_ramp, mu_lo[zp], 0.0)
    c[: ng - 1] -= np.where(coup.p_hi_is_ramp, mu_hi[zp], 0.0)

    vdev = sol.z.v - x.v
    vg = slice(vmap.sl_vg.start, vmap.sl_vg.stop)
    tie_w = opts.voltage_tie_weight * problem.eqs.gen_mult
    c[vg] = -tie_w * vdev

    p_base = sol.base_state.slack_real
    c[vmap.i_psl] = -sigma * 2.0 * sys.gen_c2[sys.slack_gen] * (
        sol.slack_setting - p_base
    )
    return c


def defense_step(sys: PowerSystem, x: Dispatch, attack: AttackVector,
                 sol: ThirdStageSolution,
                 cfg: DefenseConfig | None = None,
                 opts: SolverOptions | None = None,
                 base_duals=None) -> DefenseStepResult:
    """One ordered Gauss-Seidel pass: solve the base group, reuse the attack.

    Performs no contingency solves.  On base-side non-convergence the step is
    rejected, the damping factor halved and the solve retried; after
    ``cfg.retries`` rejections the previous dispatch is returned with a stall
    flag.
    """
    cfg = cfg or DefenseConfig()
    opts = opts or SolverOptions()
    coupling = coupling_vector(sys, x, sol, opts)
    prox = (x.to_vector(), cfg.prox_weight) if cfg.prox_weight > 0 else None
    problem = BaseOpfProblem(sys, opts, coupling=coupling, prox=prox)
    u0 = assemble_primal(sys, x, sol.base_state, problem.vmap)

    lam0 = mu0 = None
    if base_duals is not None:
        lam0, mu0 = base_duals

    res = None
    eta = cfg.damping
    stall_reason = ""
    for attempt in range(cfg.retries + 1):
        res = _solve_base_group(problem, u0, opts, cfg, lam0, mu0)
        if res is None:
            stall_reason = "base-side KKT solve did not converge"
            eta *= 0.5
            continue
        x_raw = Dispatch.from_vector(sys, res.u[: problem.vmap.n_dispatch])
        x_new = Dispatch(p=x.p + eta * (x_raw.p - x.p),
                         v=x.v + eta * (x_raw.v - x.v))
        try:
            pf = solve_power_flow(sys, x_new, tol=opts.pf_tol,
                                  max_iter=opts.pf_max_iter)
        except SingularSystemError:
            pf = None
        if pf is not None and pf.converged and pf.residual <= cfg.base_tol:
            return DefenseStepResult(
                x=x_new, state=pf.state, lam=res.lam, mu=res.mu,
                kkt_residual=res.residual, pf_residual=pf.residual,
                coupling=coupling,
                coupling_norm=float(np.abs(coupling).max()),
                eta=eta, stalled=False,
            )
        stall_reason = "blended dispatch lost base power-flow feasibility"
        eta *= 0.5

    pf = solve_power_flow(sys, x, tol=opts.pf_tol, max_iter=opts.pf_max_iter)
    return DefenseStepResult(
        x=x, state=pf.state, lam=None, mu=None,
        kkt_residual=float("nan"), pf_residual=pf.residual,
        coupling=coupling, coupling_norm=float(np.abs(coupling).max()),
        eta=eta, stalled=True, stall_reason=stall_reason,
    )


def _solve_base_group(problem, u0, opts, cfg, lam0, mu0):
    """Warm attempt at the final barrier, falling back to the full schedule."""
    if lam0 is not None:
        warm_opts = SolverOptions(**{
            **opts.__dict__, "max_newton": cfg.warm_newton_budget,
        })
        try:
            return solve_kkt_newton(problem, u0, warm_opts, tol=cfg.base_tol,
                                    lam0=lam0, mu0=mu0,
                                    barrier_start=opts.barrier_min)
        except (ConvergenceError, SingularSystemError):
            pass
    try:
        return solve_kkt_newton(problem, u0, opts, tol=cfg.base_tol)
    except (ConvergenceError, SingularSystemError):
        return None


def outer_gradient_step(sys: PowerSystem, x: Dispatch, attack: AttackVector,
                        sol: ThirdStageSolution, beta: float,
                        opts: SolverOptions | None = None) -> Dispatch:
    """Projected gradient alternative to the Gauss-Seidel defense.

    The attack is held fixed while the dispatch moves against the loss
    gradient; the projection is per-coordinate clipping onto the dispatch
    box.  Base power-flow feasibility is not guaranteed by this mode.
    """
    if beta < 0:
        raise ValueError("step size must be nonnegative")
    opts = opts or SolverOptions()
    grad = dispatch_gradient(sys, x, attack, sol)
    vec = x.to_vector() - beta * grad
    ns = sys.nonslack_gens
    ng = sys.n_gen
    p = np.clip(vec[: ng - 1], sys.gen_p_min[ns], sys.gen_p_max[ns])
    v = np.clip(vec[ng - 1 :], sys.v_min[sys.gen_bus], sys.v_max[sys.gen_bus])
    return Dispatch(p=p, v=v)


def combined_kkt_residual(sys: PowerSystem, x: Dispatch, attack: AttackVector,
                          sol: ThirdStageSolution, base_duals,
                          base_state: NetworkState,
                          opts: SolverOptions | None = None) -> float:
    """Residual of the single-minimization KKT system (both groups stacked).

    The base group carries the coupling terms evaluated at the frozen
    contingency solution; the contingency group is the third-stage KKT
    residual evaluated against the given dispatch.
    """
    opts = opts or SolverOptions()
    lam, mu = base_duals
    coupling = coupling_vector(sys, x, sol, opts)
    problem = BaseOpfProblem(sys, opts, coupling=coupling)
    u = assemble_primal(sys, x, base_state, problem.vmap)
    base_res = kkt_residual_norm(problem, u, None, lam, mu, opts.barrier_min)
    cont_res = kkt_residual(sys, x, attack, sol)
    return max(base_res, cont_res)
