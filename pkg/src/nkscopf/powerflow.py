"""Nonlinear AC power flow and the dispatch / network-state containers.

The plain power flow is a pure equality solve: generator reactive powers and
the slack real power are free state variables, and no operating limits are
enforced here.  Limit handling lives in the optimization solvers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import instrumentation
from .acequations import AcEquations, VariableMap
from .errors import InfeasibleError, SingularSystemError
from .grid_model import AttackVector, PowerSystem
from .ipm import SolverOptions, kkt_residual_norm, solve_kkt_newton

__all__ = [
    "Dispatch",
    "NetworkState",
    "PowerFlowResult",
    "power_mismatch",
    "solve_power_flow",
    "solve_base_opf",
    "BaseOpfProblem",
    "BaseOpfSolution",
    "flat_state",
]


@dataclass
class Dispatch:
    """First-stage decision: non-slack real powers and all gen voltages."""

    p: np.ndarray  # (n_gen - 1,) real power of non-slack generators, p.u.
    v: np.ndarray  # (n_gen,) voltage magnitude setpoints of all generators

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.v = np.asarray(self.v, dtype=float)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.v])

    @classmethod
    def from_vector(cls, sys: PowerSystem, vec) -> "Dispatch":
        ng = sys.n_gen
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (2 * ng - 1,):
            raise ValueError(f"dispatch vector must have length {2 * ng - 1}")
        return cls(p=vec[: ng - 1].copy(), v=vec[ng - 1 :].copy())

    @classmethod
    def nominal(cls, sys: PowerSystem) -> "Dispatch":
        """Dispatch from the case file's scheduled generation."""
        return cls(p=sys.gen_nominal_p[sys.nonslack_gens].copy(),
                   v=sys.gen_nominal_v.copy())

    def validate(self, sys: PowerSystem, tol: float = 1e-9):
        ns = sys.nonslack_gens
        if np.any(self.p < sys.gen_p_min[ns] - tol) or np.any(
            self.p > sys.gen_p_max[ns] + tol
        ):
            raise ValueError("dispatch real power outside generator limits")
        vmin = sys.v_min[sys.gen_bus]
        vmax = sys.v_max[sys.gen_bus]
        if np.any(self.v < vmin - tol) or np.any(self.v > vmax + tol):
            raise ValueError("dispatch voltage setpoint outside bus limits")
        return self


@dataclass
class NetworkState:
    """Electrical quantities determined by solving the power flow."""

    angle: np.ndarray        # (n_bus - 1,) radians at non-slack buses
    pq_voltage: np.ndarray   # (n_pq,) magnitudes at non-generator buses
    gen_reactive: np.ndarray  # (n_gen,)
    slack_real: float

    def to_vector(self) -> np.ndarray:
        # layout mirrors the tail of the flat primal vector:
        # [p_slack, q_g, v_pq, theta]
        return np.concatenate([
            [self.slack_real], self.gen_reactive, self.pq_voltage, self.angle,
        ])

    @classmethod
    def from_vector(cls, sys: PowerSystem, vec) -> "NetworkState":
        ng, npq, nb = sys.n_gen, sys.n_pq, sys.n_bus
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (2 * nb,):
            raise ValueError(f"network state vector must have length {2 * nb}")
        return cls(
            slack_real=float(vec[0]),
            gen_reactive=vec[1 : 1 + ng].copy(),
            pq_voltage=vec[1 + ng : 1 + ng + npq].copy(),
            angle=vec[1 + ng + npq :].copy(),
        )

    def bus_voltages(self, sys: PowerSystem, x: Dispatch):
        vmap = VariableMap(sys)
        u = assemble_primal(sys, x, self, vmap)
        vm, va, _, _ = vmap.unpack(u)
        return vm, va

    def to_dict(self, sys: PowerSystem, x: Dispatch) -> dict:
        vm, va = self.bus_voltages(sys, x)
        return {
            "bus_id": [b.id for b in sys.buses],
            "voltage_pu": [float(v) for v in vm],
            "angle_rad": [float(a) for a in va],
            "gen_reactive_pu": [float(q) for q in self.gen_reactive],
            "slack_real_pu": float(self.slack_real),
        }


@dataclass
class PowerFlowResult:
    state: NetworkState
    iterations: int
    residual: float
    converged: bool


def assemble_primal(sys: PowerSystem, x: Dispatch, w: NetworkState,
                    vmap: VariableMap | None = None) -> np.ndarray:
    vmap = vmap or VariableMap(sys)
    u = np.empty(vmap.n_prim)
    u[: vmap.n_dispatch] = x.to_vector()
    u[vmap.n_dispatch :] = w.to_vector()
    return u


def flat_state(sys: PowerSystem) -> NetworkState:
    """Flat start: unit magnitudes, zero angles, zero generator injections."""
    return NetworkState(
        angle=np.zeros(sys.n_bus - 1),
        pq_voltage=np.ones(sys.n_pq),
        gen_reactive=np.zeros(sys.n_gen),
        slack_real=0.0,
    )


def power_mismatch(sys: PowerSystem, x: Dispatch, w: NetworkState,
                   attack: AttackVector | None = None,
                   equations: AcEquations | None = None) -> np.ndarray:
    """Real and reactive balance residuals at every bus (length 2*n_bus).

    Scheduled injections (generation minus load, with outage-eligible
    generator outputs scaled by 1 - y_j) minus the network flows of the
    attack-modulated admittance matrix.
    """
    if equations is None:
        y = attack.validate(sys.n_outage).values if attack is not None else None
        equations = AcEquations(sys, y)
    if len(x.p) != sys.n_gen - 1 or len(x.v) != sys.n_gen:
        raise ValueError("dispatch dimensions do not match the system")
    u = assemble_primal(sys, x, w, equations.vmap)
    return equations.mismatch(u)


def solve_power_flow(sys: PowerSystem, x: Dispatch,
                     attack: AttackVector | None = None,
                     tol: float = 1e-8, max_iter: int = 50,
                     start: NetworkState | None = None,
                     trace_path: str | None = None,
                     equations: AcEquations | None = None) -> PowerFlowResult:
    """Newton solve of the AC power flow for a fixed dispatch.

    Returns an explicit divergence result (``converged=False``) when the
    iteration budget runs out; raises :class:`SingularSystemError` when the
    Jacobian factorization fails (for example a load bus islanded by a
    discrete outage).
    """
    instrumentation.record("power_flow_solves")
    if equations is None:
        y = attack.validate(sys.n_outage).values if attack is not None else None
        equations = AcEquations(sys, y)
    vmap = equations.vmap
    w = start if start is not None else flat_state(sys)
    u = assemble_primal(sys, x, w, vmap)
    state_cols = np.arange(vmap.n_dispatch, vmap.n_prim)

    trace_rows = []
    residual = np.inf
    iterations = 0
    converged = False
    for it in range(max_iter + 1):
        g, jac = equations.mismatch_and_jacobian(u)
        residual = float(np.abs(g).max()) if g.size else 0.0
        trace_rows.append((it, residual))
        if residual <= tol:
            converged = True
            iterations = it
            break
        if it == max_iter:
            iterations = it
            break
        jw = jac[:, state_cols].tocsc()
        try:
            lu = spla.splu(jw)
        except RuntimeError as exc:
            raise SingularSystemError(
                f"power-flow Jacobian is singular at iteration {it} "
                f"(residual {residual:.3e}): {exc}"
            ) from exc
        step = lu.solve(-g)
        if not np.all(np.isfinite(step)):
            raise SingularSystemError(
                f"power-flow Jacobian is numerically singular at iteration {it}"
            )
        u[state_cols] += step
        iterations = it + 1

    if trace_path:
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "residual"])
            writer.writerows(trace_rows)

    state = NetworkState.from_vector(sys, u[vmap.n_dispatch :])
    return PowerFlowResult(state=state, iterations=iterations,
                           residual=residual, converged=converged)


# ---------------------------------------------------------------------------
# base-case optimal power flow
# ---------------------------------------------------------------------------


def generation_cost(sys: PowerSystem, pgen: np.ndarray) -> float:
    """Total quadratic production cost in $/hr for per-unit outputs."""
    return float(np.sum(sys.gen_c2 * pgen * pgen + sys.gen_c1 * pgen + sys.gen_c0))


class BaseOpfProblem:
    """min cost(p) s.t. power flow and box limits; no infeasibility slack.

    ``coupling`` is an optional constant vector added to the stationarity
    rows; the defense step uses it to carry the contingency-side terms.
    ``prox`` is an optional (center, weight) pair adding a proximal penalty
    on the dispatch coordinates, which keeps a single Gauss-Seidel pass from
    overshooting the stale frozen coupling.
    """

    with_slack = False

    def __init__(self, sys: PowerSystem, opts: SolverOptions, coupling=None,
                 prox=None):
        self.sys = sys
        self.opts = opts
        self.eqs = AcEquations(sys, None)
        self.vmap = self.eqs.vmap
        self.n_prim = self.vmap.n_prim
        self.n_eq = self.eqs.n_eq
        self.stationarity_offset = coupling
        self.prox = prox

        vmap, ng = self.vmap, sys.n_gen
        idx = np.concatenate([
            np.arange(ng - 1),                      # non-slack p
            np.arange(vmap.sl_vg.start, vmap.sl_vg.stop),
            [vmap.i_psl],
            np.arange(vmap.sl_q.start, vmap.sl_q.stop),
            np.arange(vmap.sl_vpq.start, vmap.sl_vpq.stop),
        ]).astype(np.int64)
        ns = sys.nonslack_gens
        sl = sys.slack_gen
        lo = np.concatenate([
            sys.gen_p_min[ns], sys.v_min[sys.gen_bus], [sys.gen_p_min[sl]],
            sys.gen_q_min, sys.v_min[sys.pq_buses],
        ])
        hi = np.concatenate([
            sys.gen_p_max[ns], sys.v_max[sys.gen_bus], [sys.gen_p_max[sl]],
            sys.gen_q_max, sys.v_max[sys.pq_buses],
        ])
        self.boxes = (idx, lo, hi)

        self._pcol = vmap.pcol
        self._thetas = np.arange(vmap.sl_th.start, vmap.sl_th.stop)
        self._hess_rows = np.concatenate([self._pcol, self._thetas])

    def cost_grad_hess(self, u):
        sys, opts = self.sys, self.opts
        p = u[self._pcol]
        th = u[self._thetas]
        sigma = opts.cost_scale
        f = sigma * generation_cost(sys, p) + 0.5 * opts.theta_reg * float(th @ th)
        grad = np.zeros(self.n_prim)
        grad[self._pcol] = sigma * (2.0 * sys.gen_c2 * p + sys.gen_c1)
        grad[self._thetas] = opts.theta_reg * th
        hvals = [sigma * 2.0 * sys.gen_c2,
                 np.full(len(self._thetas), opts.theta_reg)]
        hrows = [self._hess_rows]
        if self.prox is not None:
            center, weight = self.prox
            nd = self.vmap.n_dispatch
            dev = u[:nd] - center
            f += 0.5 * weight * float(dev @ dev)
            grad[:nd] += weight * dev
            hvals.append(np.full(nd, weight))
            hrows.append(np.arange(nd))
        rows = np.concatenate(hrows)
        hess = sp.coo_matrix(
            (np.concatenate(hvals), (rows, rows)),
            shape=(self.n_prim, self.n_prim),
        ).tocsr()
        return f, grad, hess

    def equality(self, u):
        return self.eqs.mismatch_and_jacobian(u)

    def eq_lagr_hessian(self, u, lam):
        return self.eqs.lagrangian_hessian(u, lam)

    def initial_point(self, x: Dispatch | None = None,
                      state: NetworkState | None = None):
        sys = self.sys
        if x is None:
            x = Dispatch.nominal(sys)
            ns = sys.nonslack_gens
            x.p = np.clip(x.p, sys.gen_p_min[ns], sys.gen_p_max[ns])
            x.v = np.clip(x.v, sys.v_min[sys.gen_bus], sys.v_max[sys.gen_bus])
        if state is None:
            pf = solve_power_flow(sys, x, tol=self.opts.pf_tol,
                                  max_iter=self.opts.pf_max_iter,
                                  equations=self.eqs)
            state = pf.state if pf.converged else flat_state(sys)
        return assemble_primal(sys, x, state, self.vmap)


@dataclass
class BaseOpfSolution:
    dispatch: Dispatch
    state: NetworkState
    lam: np.ndarray
    mu: np.ndarray
    objective: float  # raw generation cost, $/hr
    kkt_residual: float
    iterations: int


def solve_base_opf(sys: PowerSystem, opts: SolverOptions | None = None,
                   tol: float | None = None,
                   start: Dispatch | None = None) -> BaseOpfSolution:
    """Minimize base-case generation cost subject to flow and box limits.

    Raises :class:`InfeasibleError` when no dispatch can cover the demand and
    :class:`ConvergenceError` when the KKT iteration stalls.
    """
    opts = opts or SolverOptions()
    total_pmax = float(sys.gen_p_max.sum())
    total_load = float(sys.pd.sum())
    if total_pmax < total_load:
        raise InfeasibleError(
            f"total generation capacity {total_pmax:.4f} p.u. cannot cover "
            f"total load {total_load:.4f} p.u.",
            max_violation=total_load - total_pmax,
        )
    problem = BaseOpfProblem(sys, opts)
    u0 = problem.initial_point(x=start)
    res = solve_kkt_newton(problem, u0, opts, tol=tol or opts.kkt_tol)
    vmap = problem.vmap
    x = Dispatch.from_vector(sys, res.u[: vmap.n_dispatch])
    state = NetworkState.from_vector(sys, res.u[vmap.n_dispatch:])
    _, _, pgen, _ = vmap.unpack(res.u)
    return BaseOpfSolution(
        dispatch=x, state=state, lam=res.lam, mu=res.mu,
        objective=generation_cost(sys, pgen),
        kkt_residual=res.residual, iterations=res.iterations,
    )
