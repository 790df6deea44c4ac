"""Post-contingency redispatch: Newton on the KKT system of the inner problem.

Given a base dispatch and a relaxed contingency, the grid operator may move
generator setpoints within ramp bands around the base schedule and voltage
setpoints within a band around the base values.  Outage-eligible devices act
through the (1 - y_j) factor: branch admittances are scaled in the network
matrix and generator outputs are scaled at the injection, so a fully outaged
unit injects exactly zero regardless of its setting.

The optimization objective penalizes redispatch by the cost increase beyond
the first-order credit at the base schedule (a Bregman divergence of the
quadratic production cost, which vanishes at the base point) plus the
quadratic infeasibility penalty ``0.5 * ||s||^2`` on the per-bus power-balance
slacks.  At y = 0 with a base-optimal dispatch the solve therefore reproduces
the base operating point with zero slack and zero flow duals, while reported
cost figures remain plain $/hr production costs of the realized injections.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import instrumentation
from .acequations import AcEquations
from .errors import ConvergenceError, SingularSystemError, StaleSolutionError
from .grid_model import AttackVector, PowerSystem
from .ipm import (
    IpmResult,
    KktFactorization,
    SolverOptions,
    box_values,
    kkt_residual_norm,
    solve_kkt_newton,
)
from .powerflow import (
    Dispatch,
    NetworkState,
    assemble_primal,
    flat_state,
    generation_cost,
    solve_power_flow,
)

__all__ = [
    "RampCoupling",
    "ThirdStageSolution",
    "ThirdStageProblem",
    "solve_third_stage",
    "kkt_residual",
    "contingency_cost",
    "complementarity_gap",
]


@dataclass
class RampCoupling:
    """Per-generator redispatch bands tying the contingency to the base case.

    Real-power settings of non-slack generators live in
    ``[x_p - r * p_max, x_p + r * p_max]`` intersected with the unit limits;
    empty intersections are widened back to the plain limits and reported in
    ``diagnostics``.  Voltage setpoints tie to the base values through a soft
    quadratic penalty whose weight scales with the unit's outage state, so a
    fully outaged generator leaves its bus voltage free within the bus limits.
    """

    p_lo: np.ndarray
    p_hi: np.ndarray
    p_widened: np.ndarray
    # which bounds move with the dispatch (the ramp side won the
    # intersection); needed for the defense coupling and dispatch gradients
    p_lo_is_ramp: np.ndarray
    p_hi_is_ramp: np.ndarray
    diagnostics: list[str] = field(default_factory=list)

    @classmethod
    def build(cls, sys: PowerSystem, x: Dispatch):
        ns = sys.nonslack_gens
        span = sys.gen_ramp[ns] * sys.gen_p_max[ns]
        p_lo = np.maximum(sys.gen_p_min[ns], x.p - span)
        p_hi = np.minimum(sys.gen_p_max[ns], x.p + span)
        p_widened = p_lo > p_hi
        diags = []
        if np.any(p_widened):
            p_lo = np.where(p_widened, sys.gen_p_min[ns], p_lo)
            p_hi = np.where(p_widened, sys.gen_p_max[ns], p_hi)
            for g in np.flatnonzero(p_widened):
                diags.append(
                    f"ramp interval of generator {ns[g]} is empty; "
                    "widened to its power limits"
                )
        p_lo_is_ramp = (~p_widened) & (x.p - span > sys.gen_p_min[ns])
        p_hi_is_ramp = (~p_widened) & (x.p + span < sys.gen_p_max[ns])
        return cls(p_lo, p_hi, p_widened, p_lo_is_ramp, p_hi_is_ramp, diags)


class ThirdStageProblem:
    """KKT problem object of the contingency redispatch optimization."""

    with_slack = True

    def __init__(self, sys: PowerSystem, x: Dispatch, attack: AttackVector,
                 opts: SolverOptions, base_slack: float):
        self.sys = sys
        self.opts = opts
        self.x = Dispatch(x.p.copy(), x.v.copy())
        self.attack = AttackVector(attack.values.copy(), attack.budget)
        self.base_slack = float(base_slack)
        self.eqs = AcEquations(sys, self.attack.values)
        self.vmap = self.eqs.vmap
        self.n_prim = self.vmap.n_prim
        self.n_eq = self.eqs.n_eq
        self.stationarity_offset = None
        self.coupling = RampCoupling.build(sys, x)

        vmap, ng = self.vmap, sys.n_gen
        sl = sys.slack_gen
        idx = np.concatenate([
            np.arange(ng - 1),
            np.arange(vmap.sl_vg.start, vmap.sl_vg.stop),
            [vmap.i_psl],
            np.arange(vmap.sl_q.start, vmap.sl_q.stop),
            np.arange(vmap.sl_vpq.start, vmap.sl_vpq.stop),
        ]).astype(np.int64)
        lo = np.concatenate([
            self.coupling.p_lo, sys.v_min[sys.gen_bus], [sys.gen_p_min[sl]],
            sys.gen_q_min, sys.v_min[sys.pq_buses],
        ])
        hi = np.concatenate([
            self.coupling.p_hi, sys.v_max[sys.gen_bus], [sys.gen_p_max[sl]],
            sys.gen_q_max, sys.v_max[sys.pq_buses],
        ])
        self.boxes = (idx, lo, hi)
        self.box_slices = {
            "zp": slice(0, ng - 1),
            "zv": slice(ng - 1, 2 * ng - 1),
            "psl": slice(2 * ng - 1, 2 * ng),
            "q": slice(2 * ng, 3 * ng),
            "vpq": slice(3 * ng, 3 * ng + sys.n_pq),
        }
        self.n_box = len(idx)
        self.n_ineq = 2 * self.n_box

        # Bregman centers for the deviation cost: base real-power settings
        self._center = np.empty(ng)
        self._center[sys.nonslack_gens] = x.p
        self._center[sl] = self.base_slack
        self._pcol = vmap.pcol
        self._vgcol = np.arange(vmap.sl_vg.start, vmap.sl_vg.stop)
        self._thetas = np.arange(vmap.sl_th.start, vmap.sl_th.stop)
        self._hess_rows = np.concatenate([self._pcol, self._vgcol, self._thetas])

    def cost_grad_hess(self, u):
        """Deviation objective: redispatch Bregman cost plus voltage ties.

        For quadratic production cost the Bregman divergence at the base
        schedule is exactly sigma * c2 * (p - center)^2, which vanishes at the
        base point.  The voltage term ties each live generator's setpoint to
        its base value; the weight carries the unit's (1 - y) outage factor,
        so a dead unit no longer holds up its bus voltage.
        """
        sys, opts = self.sys, self.opts
        p = u[self._pcol]
        vg = u[self._vgcol]
        th = u[self._thetas]
        sigma = opts.cost_scale
        c2 = sys.gen_c2
        tie_w = opts.voltage_tie_weight * self.eqs.gen_mult
        dev = p - self._center
        vdev = vg - self.x.v
        f = (sigma * float(np.sum(c2 * dev * dev))
             + 0.5 * float(tie_w @ (vdev * vdev))
             + 0.5 * opts.theta_reg * float(th @ th))
        grad = np.zeros(self.n_prim)
        grad[self._pcol] = sigma * 2.0 * c2 * dev
        grad[self._vgcol] = tie_w * vdev
        grad[self._thetas] = opts.theta_reg * th
        hvals = np.concatenate([
            sigma * 2.0 * c2,
            tie_w,
            np.full(len(self._thetas), opts.theta_reg),
        ])
        hess = sp.coo_matrix(
            (hvals, (self._hess_rows, self._hess_rows)),
            shape=(self.n_prim, self.n_prim),
        ).tocsr()
        return f, grad, hess

    def equality(self, u):
        return self.eqs.mismatch_and_jacobian(u)

    def eq_lagr_hessian(self, u, lam):
        return self.eqs.lagrangian_hessian(u, lam)

    def kkt_layout(self):
        """(n_prim, n_eq, n_ineq) and row offsets of the stacked KKT system."""
        n, m = self.n_prim, self.n_eq
        return {
            "stat": 0,
            "s": n,
            "eq": n + m,
            "comp": n + 2 * m,
            "dim": n + 2 * m + self.n_ineq,
        }


@dataclass
class ThirdStageSolution:
    z: Dispatch
    s: np.ndarray
    w_cont: NetworkState
    lam: np.ndarray
    mu: np.ndarray
    barrier: float
    converged: bool
    iterations: int
    kkt_factorization: KktFactorization
    rhs_b: np.ndarray
    problem: ThirdStageProblem
    u: np.ndarray
    final_x: np.ndarray
    base_state: NetworkState
    residual: float

    @property
    def slack_setting(self) -> float:
        return float(self.u[self.problem.vmap.i_psl])

    def gen_settings(self) -> np.ndarray:
        """Per-generator contingency real-power settings (pre outage scaling)."""
        _, _, pgen, _ = self.problem.vmap.unpack(self.u)
        return pgen

    def gen_injections(self) -> np.ndarray:
        """Realized generator real-power outputs after outage scaling."""
        return self.problem.eqs.gen_mult * self.gen_settings()

    def matches(self, x: Dispatch, attack: AttackVector) -> bool:
        return (
            np.array_equal(self.problem.x.to_vector(), x.to_vector())
            and np.array_equal(self.problem.attack.values, attack.values)
            and self.problem.attack.budget == attack.budget
        )


def solve_third_stage(sys: PowerSystem, x: Dispatch, attack: AttackVector,
                      opts: SolverOptions | None = None,
                      base_state: NetworkState | None = None,
                      trace_path: str | None = None) -> ThirdStageSolution:
    """Solve the contingency redispatch KKT system for one attack vector.

    The returned factorization is the one from the final Newton iteration,
    never recomputed, and supports transpose solves for the implicit
    gradients.  Raises :class:`ConvergenceError` with the residual history on
    iteration exhaustion and :class:`SingularSystemError` on a numerically
    singular KKT matrix.
    """
    opts = opts or SolverOptions()
    attack.validate(sys.n_outage)
    x.validate(sys)
    instrumentation.record("third_stage_solves")

    if base_state is None:
        pf = solve_power_flow(sys, x, tol=opts.pf_tol, max_iter=opts.pf_max_iter)
        if not pf.converged:
            raise ConvergenceError(
                "base power flow for the given dispatch did not converge; "
                "third-stage solve needs a base-feasible dispatch",
                residual_history=[pf.residual],
            )
        base_state = pf.state

    problem = ThirdStageProblem(sys, x, attack, opts, base_state.slack_real)

    try:
        pf_cont = solve_power_flow(sys, x, attack, tol=opts.pf_tol,
                                   max_iter=opts.pf_max_iter)
        w0 = pf_cont.state if pf_cont.converged else flat_state(sys)
    except SingularSystemError:
        w0 = flat_state(sys)
    u0 = assemble_primal(sys, x, w0, problem.vmap)

    trace = [] if trace_path else None
    res = solve_kkt_newton(problem, u0, opts, tol=opts.kkt_tol, trace=trace)
    if trace_path:
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "kkt_residual", "barrier"])
            writer.writerows(trace)

    vmap = problem.vmap
    return ThirdStageSolution(
        z=Dispatch.from_vector(sys, res.u[: vmap.n_dispatch]),
        s=res.s,
        w_cont=NetworkState.from_vector(sys, res.u[vmap.n_dispatch :]),
        lam=res.lam,
        mu=res.mu,
        barrier=res.barrier,
        converged=res.converged,
        iterations=res.iterations,
        kkt_factorization=res.factorization,
        rhs_b=res.rhs_b,
        problem=problem,
        u=res.u,
        final_x=res.final_x,
        base_state=base_state,
        residual=res.residual,
    )


def kkt_residual(sys: PowerSystem, x: Dispatch, attack: AttackVector,
                 sol: ThirdStageSolution) -> float:
    """Stacked KKT residual norm at the solution's point, for given inputs.

    Uses the same relaxed complementarity parameter the solver exited with.
    """
    if sol.matches(x, attack):
        problem = sol.problem
    else:
        base_state = sol.base_state
        if not np.array_equal(sol.problem.x.to_vector(), x.to_vector()):
            pf = solve_power_flow(sys, x, tol=sol.problem.opts.pf_tol)
            if not pf.converged:
                raise ConvergenceError("base power flow did not converge")
            base_state = pf.state
        problem = ThirdStageProblem(sys, x, attack, sol.problem.opts,
                                    base_state.slack_real)
    return kkt_residual_norm(problem, sol.u, sol.s, sol.lam, sol.mu, sol.barrier)


def contingency_cost(sys: PowerSystem, settings: np.ndarray,
                     attack: AttackVector | None = None) -> float:
    """Production cost in $/hr of the realized contingency outputs.

    ``settings`` holds all generator real-power settings; outage-eligible
    units inject (1 - y_j) times their setting, and the cost is evaluated on
    those realized outputs (the cost form itself is unchanged by outages).
    """
    settings = np.asarray(settings, dtype=float)
    if settings.shape != (sys.n_gen,):
        raise ValueError(f"settings must have length {sys.n_gen}")
    y = attack.validate(sys.n_outage).values if attack is not None else None
    inj = sys.gen_scale(y) * settings
    return generation_cost(sys, inj)


def complementarity_gap(sol: ThirdStageSolution) -> float:
    """|mu . h| at the solution (bounded by n_ineq * barrier at exit)."""
    idx, lo, hi = sol.problem.boxes
    h = box_values(sol.u, idx, lo, hi)
    return float(abs(np.dot(sol.mu, h)))


def inner_loss_terms(sys: PowerSystem, sol: ThirdStageSolution):
    """(contingency cost in $/hr, 0.5 * ||s||^2) of a converged solution."""
    f_cont = contingency_cost(sys, sol.gen_settings(), sol.problem.attack)
    s_half = 0.5 * float(sol.s @ sol.s)
    return f_cont, s_half


def inner_loss(sys: PowerSystem, sol: ThirdStageSolution) -> float:
    """Attack-side loss in normalized units: scaled cost plus slack penalty.

    The base-case cost does not depend on the attack and is not included.
    """
    f_cont, s_half = inner_loss_terms(sys, sol)
    return sol.problem.opts.cost_scale * f_cont + s_half
