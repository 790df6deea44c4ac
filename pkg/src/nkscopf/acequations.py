"""Shared assembly of the polar AC power-balance equations.

One flat primal layout is used by every solver in the package:

    u = [ p_g (non-slack gens) | v_g (all gens) | p_slack | q_g (all gens)
          | v (non-generator buses) | theta (non-slack buses) ]

so the first ``2*n_gen - 1`` entries are exactly a dispatch vector and the
remaining ``2*n_bus`` entries are exactly a network-state vector.  The
mismatch convention is ``g = scheduled injection - network flow``; a state
solves the power flow iff ``g = 0``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import kernels
from .grid_model import PowerSystem

__all__ = ["VariableMap", "AcEquations"]


class VariableMap:
    """Index bookkeeping for the flat primal layout."""

    def __init__(self, sys: PowerSystem):
        nb, ng, npq = sys.n_bus, sys.n_gen, sys.n_pq
        self.sys = sys
        self.n_dispatch = 2 * ng - 1
        self.n_state = 2 * nb
        self.n_prim = self.n_dispatch + self.n_state

        self.sl_pns = slice(0, ng - 1)
        self.sl_vg = slice(ng - 1, 2 * ng - 1)
        self.i_psl = 2 * ng - 1
        self.sl_q = slice(2 * ng, 3 * ng)
        self.sl_vpq = slice(3 * ng, 3 * ng + npq)
        self.sl_th = slice(3 * ng + npq, 3 * ng + npq + nb - 1)

        self.nonslack_buses = np.array(
            [b for b in range(nb) if b != sys.slack_bus], dtype=np.int64
        )
        # column of the voltage magnitude / angle of each bus in u
        self.vcol = np.empty(nb, dtype=np.int64)
        self.vcol[sys.gen_bus] = np.arange(ng) + self.sl_vg.start
        self.vcol[sys.pq_buses] = np.arange(npq) + self.sl_vpq.start
        self.thcol = np.full(nb, -1, dtype=np.int64)
        self.thcol[self.nonslack_buses] = np.arange(nb - 1) + self.sl_th.start
        # column of each generator's real / reactive power in u
        self.pcol = np.empty(ng, dtype=np.int64)
        self.pcol[sys.nonslack_gens] = np.arange(ng - 1)
        self.pcol[sys.slack_gen] = self.i_psl
        self.qcol = np.arange(ng) + self.sl_q.start

    def unpack(self, u):
        """Bus-level (vm, va) and generator (p, q) from a primal vector."""
        sys = self.sys
        vm = np.empty(sys.n_bus)
        vm[sys.gen_bus] = u[self.sl_vg]
        vm[sys.pq_buses] = u[self.sl_vpq]
        va = np.zeros(sys.n_bus)
        va[self.nonslack_buses] = u[self.sl_th]
        pgen = np.empty(sys.n_gen)
        pgen[sys.nonslack_gens] = u[self.sl_pns]
        pgen[sys.slack_gen] = u[self.i_psl]
        qgen = np.asarray(u[self.sl_q])
        return vm, va, pgen, qgen

    def pack(self, vm, va, pgen, qgen):
        sys = self.sys
        u = np.empty(self.n_prim)
        u[self.sl_pns] = pgen[sys.nonslack_gens]
        u[self.sl_vg] = vm[sys.gen_bus]
        u[self.i_psl] = pgen[sys.slack_gen]
        u[self.sl_q] = qgen
        u[self.sl_vpq] = vm[sys.pq_buses]
        u[self.sl_th] = va[self.nonslack_buses]
        return u


class AcEquations:
    """Mismatch residual, Jacobian and Lagrangian Hessian for a topology.

    ``attack_values`` modulates the network: branch admittances and generator
    outputs of outage-eligible devices are scaled by (1 - y_j).  The equation
    count is ``2 * n_bus`` (real then reactive balance per bus).
    """

    def __init__(self, sys: PowerSystem, attack_values: np.ndarray | None = None,
                 vmap: VariableMap | None = None):
        self.sys = sys
        self.vmap = vmap or VariableMap(sys)
        self.y = None if attack_values is None else np.asarray(attack_values, float)
        self.gen_mult = sys.gen_scale(self.y)
        self.n_eq = 2 * sys.n_bus

        rows, cols, data = sys.admittance_triplets(self.y)
        pattern = sp.coo_matrix(
            (np.ones_like(data.real), (rows, cols)), shape=(sys.n_bus, sys.n_bus)
        ).tocsr()
        pattern.sort_indices()
        ymat = sp.coo_matrix((data, (rows, cols)), shape=pattern.shape).tocsr()
        ymat.sort_indices()
        self.erow = np.repeat(
            np.arange(sys.n_bus, dtype=np.int64), np.diff(ymat.indptr)
        )
        self.ecol = ymat.indices.astype(np.int64)
        self.gval = np.ascontiguousarray(ymat.data.real)
        self.bval = np.ascontiguousarray(ymat.data.imag)
        # position of the transposed coordinate of each entry (the pattern is
        # structurally symmetric, so this is a permutation)
        tagged = sp.csr_matrix(
            (np.arange(len(self.ecol), dtype=np.int64) + 1,
             ymat.indices, ymat.indptr), shape=ymat.shape
        )
        tagged_t = tagged.T.tocsr()
        tagged_t.sort_indices()
        self.tperm = np.ascontiguousarray(tagged_t.data - 1)

        self._build_patterns()

    # -- fixed index patterns ------------------------------------------------

    def _build_patterns(self):
        sys, vmap = self.sys, self.vmap
        nb = sys.n_bus
        er, ec = self.erow, self.ecol
        th_ok = vmap.thcol[ec] >= 0
        self._th_ok = th_ok

        jac_rows = np.concatenate([
            er[th_ok], er, er[th_ok] + nb, er + nb,
            sys.gen_bus, sys.gen_bus + nb,
        ])
        jac_cols = np.concatenate([
            vmap.thcol[ec[th_ok]], vmap.vcol[ec],
            vmap.thcol[ec[th_ok]], vmap.vcol[ec],
            vmap.pcol, vmap.qcol,
        ])
        self._jac_rows = jac_rows
        self._jac_cols = jac_cols

        off = er != ec
        both_th = off & (vmap.thcol[er] >= 0) & th_ok
        row_th = off & (vmap.thcol[er] >= 0)
        col_th = off & th_ok
        self._h_off = off
        self._h_both_th = both_th
        self._h_row_th = row_th
        self._h_col_th = col_th
        diag_th = vmap.thcol >= 0

        hrows = np.concatenate([
            vmap.thcol[er[both_th]], vmap.thcol[er[row_th]],
            vmap.vcol[er[col_th]], vmap.vcol[er[off]],
            vmap.thcol[diag_th], vmap.thcol[diag_th], vmap.vcol[diag_th],
            vmap.vcol,
        ])
        hcols = np.concatenate([
            vmap.thcol[ec[both_th]], vmap.vcol[ec[row_th]],
            vmap.thcol[ec[col_th]], vmap.vcol[ec[off]],
            vmap.thcol[diag_th], vmap.vcol[diag_th], vmap.thcol[diag_th],
            vmap.vcol,
        ])
        self._hess_rows = hrows
        self._hess_cols = hcols
        self._diag_th = diag_th

    # -- evaluations ---------------------------------------------------------

    def injections(self, pgen, qgen):
        sys = self.sys
        injp = np.bincount(sys.gen_bus, weights=self.gen_mult * pgen,
                           minlength=sys.n_bus) - sys.pd
        injq = np.bincount(sys.gen_bus, weights=self.gen_mult * qgen,
                           minlength=sys.n_bus) - sys.qd
        return injp, injq

    def calc_power(self, vm, va):
        return kernels.bus_power(self.erow, self.ecol, self.gval, self.bval,
                                 vm, va, self.sys.n_bus)

    def mismatch(self, u):
        vm, va, pgen, qgen = self.vmap.unpack(u)
        pcalc, qcalc = self.calc_power(vm, va)
        injp, injq = self.injections(pgen, qgen)
        return np.concatenate([injp - pcalc, injq - qcalc])

    def mismatch_and_jacobian(self, u):
        """Residual and sparse Jacobian w.r.t. the full primal vector."""
        vm, va, pgen, qgen = self.vmap.unpack(u)
        pcalc, qcalc = self.calc_power(vm, va)
        injp, injq = self.injections(pgen, qgen)
        g = np.concatenate([injp - pcalc, injq - qcalc])

        jpth, jpv, jqth, jqv = kernels.flow_jacobian_entries(
            self.erow, self.ecol, self.gval, self.bval, vm, va, pcalc, qcalc
        )
        ok = self._th_ok
        vals = np.concatenate([
            -jpth[ok], -jpv, -jqth[ok], -jqv,
            self.gen_mult, self.gen_mult,
        ])
        jac = sp.coo_matrix(
            (vals, (self._jac_rows, self._jac_cols)),
            shape=(self.n_eq, self.vmap.n_prim),
        ).tocsr()
        return g, jac

    def lagrangian_hessian(self, u, lam):
        """Hessian of lam . g(u) w.r.t. u as a sparse matrix."""
        vm, va, _, _ = self.vmap.unpack(u)
        nb = self.sys.n_bus
        lp = lam[:nb]
        lq = lam[nb:]
        othth, othv, ovth, ovv, dthth, dthv, dvv = kernels.weighted_flow_hessian(
            self.erow, self.ecol, self.gval, self.bval, vm, va, lp, lq,
            self.tperm, nb,
        )
        off, both_th, row_th, col_th = (self._h_off, self._h_both_th,
                                        self._h_row_th, self._h_col_th)
        dth = self._diag_th
        vals = np.concatenate([
            -othth[both_th], -othv[row_th], -ovth[col_th], -ovv[off],
            -dthth[dth], -dthv[dth], -dthv[dth], -dvv,
        ])
        return sp.coo_matrix(
            (vals, (self._hess_rows, self._hess_cols)),
            shape=(self.vmap.n_prim, self.vmap.n_prim),
        ).tocsr()
