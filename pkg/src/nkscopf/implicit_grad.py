"""Implicit differentiation of the converged contingency solve.

The third-stage solver leaves behind the factorized Jacobian of its final
Newton iteration.  Differentiating the linear fixed-point equation of that
iteration gives, per outage device j,

    d(solution)/dy_j = J^{-1} (-(dJ/dy_j) [z*; s*; ...] + db/dy_j),

and the loss gradient contracts this with the loss sensitivities via one
transpose solve against the stored factorization (a vector-Jacobian product;
the solution Jacobian is never materialized and J is never refactorized).
The per-device derivative of (J, b) is extremely sparse: a branch touches the
four balance rows of its end buses and the four matching stationarity rows,
a generator two balance rows and two stationarity rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NkScopfError, StaleSolutionError
from .grid_model import AttackVector, PowerSystem
from .powerflow import Dispatch, assemble_primal, solve_power_flow
from .third_stage import ThirdStageSolution, inner_loss, solve_third_stage

__all__ = [
    "AttackGradient",
    "SparseDerivativeStencil",
    "build_stencils",
    "attack_gradient",
    "djdy_vjp",
    "finite_diff_gradient",
    "loss_sensitivity_vector",
    "dispatch_gradient",
]

STENCIL_NNZ_BOUND = 20


@dataclass
class SparseDerivativeStencil:
    """Directional derivative of the final (J, b) system in one y coordinate.

    ``rows``/``values`` encode the vector -(dJ/dy_j) x* + db/dy_j over the
    stacked KKT unknowns; its nonzero count is bounded by
    :data:`STENCIL_NNZ_BOUND` on any network.
    """

    device: int
    rows: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.values))


@dataclass
class AttackGradient:
    """Loss gradient w.r.t. the attack, split for diagnostics."""

    values: np.ndarray
    explicit: np.ndarray   # direct cost sensitivity to the outage fractions
    implicit: np.ndarray   # sensitivity through the redispatch solution


def _branch_flow_terms(sys, b, vm, va):
    """Unit-scale branch contributions to its end-bus powers + derivatives.

    Returns (values, derivs) where values = (Pf, Qf, Pt, Qt) and derivs is a
    4x4 array d(values)/d(theta_f, theta_t, v_f, v_t), all evaluated at the
    unscaled branch admittance.
    """
    f, t = sys.branch_from[b], sys.branch_to[b]
    gff, bff = sys.yff[b].real, sys.yff[b].imag
    gft, bft = sys.yft[b].real, sys.yft[b].imag
    gtf, btf = sys.ytf[b].real, sys.ytf[b].imag
    gtt, btt = sys.ytt[b].real, sys.ytt[b].imag
    vf, vt = vm[f], vm[t]
    dth = va[f] - va[t]
    c, s = np.cos(dth), np.sin(dth)

    af = gft * c + bft * s
    bf = gft * s - bft * c
    at = gtf * c - btf * s
    bt = -gtf * s - btf * c

    pf = vf * vf * gff + vf * vt * af
    qf = -vf * vf * bff + vf * vt * bf
    pt = vt * vt * gtt + vt * vf * at
    qt = -vt * vt * btt + vt * vf * bt

    derivs = np.array([
        # d/dtheta_f,      d/dtheta_t,     d/dv_f,              d/dv_t
        [-vf * vt * bf, vf * vt * bf, 2 * vf * gff + vt * af, vf * af],
        [vf * vt * af, -vf * vt * af, -2 * vf * bff + vt * bf, vf * bf],
        [vt * vf * bt, -vt * vf * bt, vt * at, 2 * vt * gtt + vf * at],
        [-vt * vf * at, vt * vf * at, vt * bt, -2 * vt * btt + vf * bt],
    ])
    return (f, t), (pf, qf, pt, qt), derivs


def build_stencils(sys: PowerSystem, sol: ThirdStageSolution):
    """Per-device sparse derivatives of the final KKT system in y."""
    problem = sol.problem
    vmap = problem.vmap
    layout = problem.kkt_layout()
    eq_off = layout["eq"]
    nb = sys.n_bus
    vm, va, _, _ = vmap.unpack(sol.u)
    lam = sol.lam
    pgen = sol.gen_settings()
    qgen = sol.u[vmap.sl_q]

    stencils = []
    for j, dev in enumerate(sys.outage_devices):
        rows = []
        vals = []
        if dev.kind == "branch":
            (f, t), (pf, qf, pt, qt), derivs = _branch_flow_terms(sys, dev.index, vm, va)
            # balance rows: g contains -(1 - y) * branch flow, so dF/dy = +flow
            for row, val in ((f, pf), (nb + f, qf), (t, pt), (nb + t, qt)):
                rows.append(eq_off + row)
                vals.append(-val)
            # stationarity rows of the four incident coordinates pick up the
            # lambda-weighted second derivatives
            lamv = np.array([lam[f], lam[nb + f], lam[t], lam[nb + t]])
            cols = [vmap.thcol[f], vmap.thcol[t], vmap.vcol[f], vmap.vcol[t]]
            for ci, col in enumerate(cols):
                if col < 0:
                    continue
                rows.append(col)
                vals.append(-float(lamv @ derivs[:, ci]))
        else:
            g = dev.index
            bus = sys.gen_bus[g]
            rows.extend([
                eq_off + bus, eq_off + nb + bus,
                vmap.pcol[g], vmap.qcol[g],
            ])
            vals.extend([
                float(pgen[g]), float(qgen[g]),
                float(lam[bus]), float(lam[nb + bus]),
            ])
            # the voltage-tie weight carries the (1 - y) outage factor
            rho_v = problem.opts.voltage_tie_weight
            rows.append(vmap.sl_vg.start + g)
            vals.append(rho_v * float(vm[bus] - problem.x.v[g]))
        stencils.append(SparseDerivativeStencil(
            device=j,
            rows=np.asarray(rows, dtype=np.int64),
            values=np.asarray(vals, dtype=float),
        ))
    return stencils


def loss_sensitivity_vector(sys: PowerSystem, sol: ThirdStageSolution) -> np.ndarray:
    """d(inner loss)/d(stacked KKT unknowns) at the solution.

    Carries the scaled marginal costs on the generator setting coordinates
    and the slack values on the slack block; zero on duals.
    """
    problem = sol.problem
    vmap = problem.vmap
    layout = problem.kkt_layout()
    sigma = problem.opts.cost_scale
    v = np.zeros(layout["dim"])
    mult = problem.eqs.gen_mult
    inj = mult * sol.gen_settings()
    marginal = 2.0 * sys.gen_c2 * inj + sys.gen_c1
    v[vmap.pcol] = sigma * mult * marginal
    v[layout["s"]: layout["s"] + problem.n_eq] = sol.s
    return v


def _explicit_terms(sys: PowerSystem, sol: ThirdStageSolution) -> np.ndarray:
    """Direct dependence of the inner loss on y (generator output scaling)."""
    problem = sol.problem
    sigma = problem.opts.cost_scale
    out = np.zeros(sys.n_outage)
    settings = sol.gen_settings()
    inj = problem.eqs.gen_mult * settings
    marginal = 2.0 * sys.gen_c2 * inj + sys.gen_c1
    for g in range(sys.n_gen):
        j = sys.gen_device[g]
        if j >= 0:
            out[j] = -sigma * settings[g] * marginal[g]
    return out


def attack_gradient(sys: PowerSystem, x: Dispatch, attack: AttackVector,
                    sol: ThirdStageSolution) -> AttackGradient:
    """Gradient of the inner loss w.r.t. the attack vector.

    Performs exactly one transpose solve against the stored factorization and
    zero refactorizations; the remaining work is sparse dot products with the
    per-device stencils.  Raises :class:`StaleSolutionError` when the
    solution does not correspond to (x, attack).
    """
    if not sol.matches(x, attack):
        raise StaleSolutionError(
            "third-stage solution was solved for different inputs than the "
            "(dispatch, attack) pair presented for differentiation"
        )
    if not sol.converged or sol.kkt_factorization is None:
        raise StaleSolutionError("third-stage solution is not converged")

    v = loss_sensitivity_vector(sys, sol)
    q = sol.kkt_factorization.solve_transpose(v)
    stencils = build_stencils(sys, sol)
    implicit = np.array([float(q[st.rows] @ st.values) for st in stencils])
    explicit = _explicit_terms(sys, sol)
    total = explicit + implicit
    if not np.all(np.isfinite(total)):
        raise NkScopfError(
            "attack gradient is non-finite; the KKT factorization is likely "
            "ill-conditioned at this point"
        )
    return AttackGradient(values=total, explicit=explicit, implicit=implicit)


def djdy_vjp(sys: PowerSystem, x: Dispatch, attack: AttackVector,
             sol: ThirdStageSolution, v: np.ndarray) -> np.ndarray:
    """Per-device products v . (-(dJ/dy_j) x* + db/dy_j).

    Cost is linear in the total stencil nonzeros; nothing dense is formed.
    """
    layout = sol.problem.kkt_layout()
    v = np.asarray(v, dtype=float)
    if v.shape != (layout["dim"],):
        raise ValueError(
            f"sensitivity vector must have KKT dimension {layout['dim']}"
        )
    stencils = build_stencils(sys, sol)
    return np.array([float(v[st.rows] @ st.values) for st in stencils])


def finite_diff_gradient(sys: PowerSystem, x: Dispatch, attack: AttackVector,
                         h: float = 1e-5, opts=None,
                         base_state=None):
    """Finite-difference oracle for the attack gradient.

    Central differences per coordinate, falling back to one-sided at the
    [0, 1] bounds; every evaluation is a fresh third-stage solve.  Returns
    (gradient, one_sided_flags).
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    if base_state is None:
        pf = solve_power_flow(sys, x)
        base_state = pf.state

    def value(yv):
        trial = AttackVector(yv, attack.budget)
        sol = solve_third_stage(sys, x, trial, opts, base_state=base_state)
        return inner_loss(sys, sol)

    y = attack.values
    grad = np.zeros(sys.n_outage)
    one_sided = np.zeros(sys.n_outage, dtype=bool)
    for j in range(sys.n_outage):
        hi_ok = y[j] + h <= 1.0
        lo_ok = y[j] - h >= 0.0
        try:
            if hi_ok and lo_ok:
                yp = y.copy(); yp[j] += h
                ym = y.copy(); ym[j] -= h
                grad[j] = (value(yp) - value(ym)) / (2 * h)
            elif hi_ok:
                yp = y.copy(); yp[j] += h
                grad[j] = (value(yp) - value(y)) / h
                one_sided[j] = True
            else:
                ym = y.copy(); ym[j] -= h
                grad[j] = (value(y) - value(ym)) / h
                one_sided[j] = True
        except NkScopfError as exc:
            raise NkScopfError(
                f"finite-difference evaluation failed at coordinate {j}: {exc}"
            ) from exc
    return grad, one_sided


# ---------------------------------------------------------------------------
# dispatch-side sensitivities (used by the projected-gradient defense mode)
# ---------------------------------------------------------------------------


def base_slack_dispatch_gradient(sys: PowerSystem, x: Dispatch, base_state):
    """d(base slack power)/d(dispatch) via the base power-flow equations."""
    from .acequations import AcEquations

    eqs = AcEquations(sys, None)
    vmap = eqs.vmap
    u = assemble_primal(sys, x, base_state, vmap)
    _, jac = eqs.mismatch_and_jacobian(u)
    jac = jac.tocsc()
    jw = jac[:, vmap.n_dispatch:]
    jx = jac[:, : vmap.n_dispatch]
    import scipy.sparse.linalg as spla

    lu = spla.splu(jw.tocsc())
    e_sl = np.zeros(2 * sys.n_bus)
    e_sl[vmap.i_psl - vmap.n_dispatch] = 1.0
    adj = lu.solve(e_sl, trans="T")
    return -np.asarray(jx.T @ adj).ravel()


def dispatch_kkt_sensitivity(sys: PowerSystem, sol: ThirdStageSolution,
                             dslack_dx: np.ndarray):
    """dF/dx of the contingency KKT system as a dense (kkt_dim, 2ng-1) map.

    Nonzeros: the Bregman center terms on the stationarity rows, the ramp and
    tie bounds in the complementarity rows, and the base-slack chain.
    """
    problem = sol.problem
    vmap = problem.vmap
    sys_ = problem.sys
    layout = problem.kkt_layout()
    ng = sys_.n_gen
    ndisp = vmap.n_dispatch
    out = np.zeros((layout["dim"], ndisp))
    sigma = problem.opts.cost_scale
    coup = problem.coupling

    ns = sys_.nonslack_gens
    # stationarity of z_p: d2/dz dx of the Bregman term
    out[vmap.pcol[ns], np.arange(ng - 1)] += -sigma * 2.0 * sys_.gen_c2[ns]
    # stationarity of z_v: voltage tie (weight carries the outage factor)
    vg_rows = np.arange(vmap.sl_vg.start, vmap.sl_vg.stop)
    tie_w = problem.opts.voltage_tie_weight * problem.eqs.gen_mult
    out[vg_rows, (ng - 1) + np.arange(ng)] += -tie_w
    # slack Bregman center moves with the base power flow
    out[vmap.i_psl, :] += -sigma * 2.0 * sys_.gen_c2[sys_.slack_gen] * dslack_dx

    comp = layout["comp"]
    nbox = problem.n_box
    zp = problem.box_slices["zp"]
    mu_lo = sol.mu[:nbox]
    mu_hi = sol.mu[nbox:]
    for gi in range(ng - 1):
        bi = zp.start + gi
        if coup.p_lo_is_ramp[gi]:
            out[comp + bi, gi] += mu_lo[bi]
        if coup.p_hi_is_ramp[gi]:
            out[comp + nbox + bi, gi] += -mu_hi[bi]
    return out


def dispatch_gradient(sys: PowerSystem, x: Dispatch, attack: AttackVector,
                      sol: ThirdStageSolution) -> np.ndarray:
    """Gradient of the full loss (base + contingency) w.r.t. the dispatch.

    Same machinery as :func:`attack_gradient` with the roles of the dispatch
    and the attack exchanged; the attack is held fixed.
    """
    if not sol.matches(x, attack):
        raise StaleSolutionError(
            "third-stage solution does not correspond to this dispatch"
        )
    sigma = sol.problem.opts.cost_scale
    base_state = sol.base_state
    dslack_dx = base_slack_dispatch_gradient(sys, x, base_state)

    # explicit part: base production cost including the slack response
    ns = sys.nonslack_gens
    sl = sys.slack_gen
    grad = np.zeros(2 * sys.n_gen - 1)
    grad[: sys.n_gen - 1] = sigma * (2.0 * sys.gen_c2[ns] * x.p + sys.gen_c1[ns])
    p_sl = base_state.slack_real
    grad += sigma * (2.0 * sys.gen_c2[sl] * p_sl + sys.gen_c1[sl]) * dslack_dx

    # implicit part through the contingency solution
    v = loss_sensitivity_vector(sys, sol)
    q = sol.kkt_factorization.solve_transpose(v)
    dfdx = dispatch_kkt_sensitivity(sys, sol, dslack_dx)
    grad -= q @ dfdx
    return grad
